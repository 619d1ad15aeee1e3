#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/arch_plan.hpp"
#include "ditforge/config.hpp"
#include "ditforge/rng.hpp"
#include "ditforge/tape.hpp"
#include "ditforge/tensor.hpp"

namespace ditforge {

// Weights are stored [in, out] so a linear layer is tokens[N,in] x W[in,out]
// plus a bias row. Canonical names, in materialization order:
//   patch_embed.weight/.bias, pos_embed, t_embed.fc1.*, t_embed.fc2.*,
//   label_embed.table, blocks.<b>.{attn.qkv, attn.out, mlp.fc1, mlp.fc2,
//   adaln}.weight/.bias for b in [0,d), final.adaln.*, final.linear.*
// label_embed.table has num_classes + 1 rows; the last row is the null class.
inline std::vector<std::pair<std::string, std::vector<int64_t>>> weight_schema(const DitConfig& cfg) {
    cfg.validate();
    const int64_t w = cfg.width, pd = cfg.patch_dim(), n = cfg.tokens();
    const int64_t mw = static_cast<int64_t>(cfg.mlp_ratio) * w;
    std::vector<std::pair<std::string, std::vector<int64_t>>> s;
    s.push_back({"patch_embed.weight", {pd, w}});
    s.push_back({"patch_embed.bias", {w}});
    s.push_back({"pos_embed", {n, w}});
    s.push_back({"t_embed.fc1.weight", {256, w}});
    s.push_back({"t_embed.fc1.bias", {w}});
    s.push_back({"t_embed.fc2.weight", {w, w}});
    s.push_back({"t_embed.fc2.bias", {w}});
    s.push_back({"label_embed.table", {cfg.num_classes + 1, w}});
    for (int b = 0; b < cfg.depth; ++b) {
        std::string p = "blocks." + std::to_string(b) + ".";
        s.push_back({p + "attn.qkv.weight", {w, 3 * w}});
        s.push_back({p + "attn.qkv.bias", {3 * w}});
        s.push_back({p + "attn.out.weight", {w, w}});
        s.push_back({p + "attn.out.bias", {w}});
        s.push_back({p + "mlp.fc1.weight", {w, mw}});
        s.push_back({p + "mlp.fc1.bias", {mw}});
        s.push_back({p + "mlp.fc2.weight", {mw, w}});
        s.push_back({p + "mlp.fc2.bias", {w}});
        s.push_back({p + "adaln.weight", {w, 6 * w}});
        s.push_back({p + "adaln.bias", {6 * w}});
    }
    s.push_back({"final.adaln.weight", {w, 2 * w}});
    s.push_back({"final.adaln.bias", {2 * w}});
    s.push_back({"final.linear.weight", {w, pd}});
    s.push_back({"final.linear.bias", {pd}});
    return s;
}

template <typename T>
struct ModelState {
    DitConfig cfg;
    std::map<std::string, Tensor<T>> weights;

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : weights) n += v.numel();
        return n;
    }

    template <typename U>
    ModelState<U> cast() const {
        ModelState<U> out;
        out.cfg = cfg;
        for (const auto& [k, v] : weights) out.weights[k] = v.template cast<U>();
        return out;
    }
};

// Initialization: truncated normal (std 0.02, clipped at 2 std) for embedding
// and projection weights, zeros for all biases, all adaln projections and the
// final linear layer. Zero adaln weight+bias makes every block's gates zero,
// so a fresh model is the identity on tokens; zero final linear makes the
// output image exactly zero. Each tensor draws from its own named stream, so
// the values do not depend on materialization order.
template <typename T>
ModelState<T> init_model(const DitConfig& cfg, uint64_t seed) {
    ModelState<T> m;
    m.cfg = cfg;
    for (const auto& [name, shape] : weight_schema(cfg)) {
        Tensor<T> w(shape);
        bool zero = name.ends_with(".bias") || name.find("adaln") != std::string::npos ||
                    name.find("final.linear") != std::string::npos;
        if (!zero) {
            Rng rng = named_stream(seed, name);
            for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.trunc_normal(0.02));
        }
        m.weights[name] = std::move(w);
    }
    return m;
}

// 256-dim frequency features of a scalar time: geometric frequencies over
// 1e4, cosines then sines.
template <typename T>
Tensor<T> timestep_frequencies(double t_value, int dim = 256) {
    Tensor<T> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = static_cast<T>(std::cos(t_value * freq));
        out[half + i] = static_cast<T>(std::sin(t_value * freq));
    }
    return out;
}

template <typename T>
struct GraphVars {
    std::vector<Var<T>> taps; // post-block token states, one per block
    Var<T> tokens_in;         // embedded input tokens
    Var<T> cond_act;          // silu(t_emb + y_emb), [1, w]
    Var<T> image;             // decoded network output [C,H,W]
};

namespace model_detail {

template <typename T>
Var<T> linear(Tape<T>& t, Var<T> x, Var<T> w, Var<T> b) {
    return add_rowvec(t, matmul(t, x, w), b);
}

// x * (1 + scale) + shift with per-channel vectors broadcast over tokens.
template <typename T>
Var<T> modulate(Tape<T>& t, Var<T> x, Var<T> shift, Var<T> scale_vec) {
    return add_rowvec(t, mul_rowvec(t, x, add_scalar(t, scale_vec, T(1))), shift);
}

} // namespace model_detail

// Decode head: norm, modulate from the conditioning vector, linear to patch
// pixels, unpatchify. Shared by the final output and every layer tap.
template <typename T>
Var<T> build_decode_head(Tape<T>& t, const std::map<std::string, Var<T>>& wv, const DitConfig& cfg,
                         Var<T> tokens, Var<T> cond_act) {
    using namespace model_detail;
    const T eps = static_cast<T>(1e-6);
    Var<T> mod = linear(t, cond_act, wv.at("final.adaln.weight"), wv.at("final.adaln.bias"));
    Var<T> shift = slice_cols(t, mod, 0, cfg.width);
    Var<T> scale_vec = slice_cols(t, mod, cfg.width, cfg.width);
    Var<T> h = modulate(t, layernorm_rows(t, tokens, eps), shift, scale_vec);
    Var<T> out_tokens = linear(t, h, wv.at("final.linear.weight"), wv.at("final.linear.bias"));
    return unpatchify(t, out_tokens, cfg.patch, cfg.in_channels, cfg.image, cfg.image);
}

// Full forward graph. class_id out of range throws; nullopt selects the null
// label row. t_const feeds the timestep embedder (a one-step student always
// passes 0, but the embedder is a real input so schedules can condition it).
template <typename T>
GraphVars<T> build_forward(Tape<T>& t, const std::map<std::string, Var<T>>& wv, const DitConfig& cfg,
                           Var<T> z, std::optional<int> class_id, double t_const = 0.0) {
    using namespace model_detail;
    cfg.validate();
    if (class_id && (*class_id < 0 || *class_id >= cfg.num_classes))
        throw ConfigError("class id " + std::to_string(*class_id) + " outside [0," +
                          std::to_string(cfg.num_classes) + ")");
    const int w = cfg.width;
    const T eps = static_cast<T>(1e-6);

    GraphVars<T> gv;
    Var<T> x = add(t, linear(t, patchify(t, z, cfg.patch), wv.at("patch_embed.weight"),
                             wv.at("patch_embed.bias")),
                   wv.at("pos_embed"));
    gv.tokens_in = x;

    Var<T> t_freq = t.constant(timestep_frequencies<T>(t_const));
    Var<T> t_emb = linear(t, silu(t, linear(t, t_freq, wv.at("t_embed.fc1.weight"), wv.at("t_embed.fc1.bias"))),
                          wv.at("t_embed.fc2.weight"), wv.at("t_embed.fc2.bias"));
    int row = class_id ? *class_id : cfg.num_classes;
    Var<T> y_emb = embed_row(t, wv.at("label_embed.table"), row);
    Var<T> cond = add(t, t_emb, y_emb);
    gv.cond_act = silu(t, cond);

    const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(w / cfg.heads)));
    for (int b = 0; b < cfg.depth; ++b) {
        std::string p = "blocks." + std::to_string(b) + ".";
        Var<T> mod = linear(t, gv.cond_act, wv.at(p + "adaln.weight"), wv.at(p + "adaln.bias"));
        Var<T> sh_msa = slice_cols(t, mod, 0 * w, w);
        Var<T> sc_msa = slice_cols(t, mod, 1 * w, w);
        Var<T> gt_msa = slice_cols(t, mod, 2 * w, w);
        Var<T> sh_mlp = slice_cols(t, mod, 3 * w, w);
        Var<T> sc_mlp = slice_cols(t, mod, 4 * w, w);
        Var<T> gt_mlp = slice_cols(t, mod, 5 * w, w);

        Var<T> h = modulate(t, layernorm_rows(t, x, eps), sh_msa, sc_msa);
        Var<T> qkv = linear(t, h, wv.at(p + "attn.qkv.weight"), wv.at(p + "attn.qkv.bias"));
        Var<T> q = slice_cols(t, qkv, 0, w);
        Var<T> k = slice_cols(t, qkv, w, w);
        Var<T> v = slice_cols(t, qkv, 2 * w, w);
        Var<T> att = attention(t, q, k, v, cfg.heads, attn_scale);
        Var<T> att_out = linear(t, att, wv.at(p + "attn.out.weight"), wv.at(p + "attn.out.bias"));
        x = add(t, x, mul_rowvec(t, att_out, gt_msa));

        Var<T> h2 = modulate(t, layernorm_rows(t, x, eps), sh_mlp, sc_mlp);
        Var<T> mlp = linear(t, gelu(t, linear(t, h2, wv.at(p + "mlp.fc1.weight"), wv.at(p + "mlp.fc1.bias"))),
                            wv.at(p + "mlp.fc2.weight"), wv.at(p + "mlp.fc2.bias"));
        x = add(t, x, mul_rowvec(t, mlp, gt_mlp));
        gv.taps.push_back(x);
    }

    gv.image = build_decode_head(t, wv, cfg, x, gv.cond_act);
    return gv;
}

// Inserts every weight as a tape leaf. requires_grad=false freezes the whole
// model (teacher use); the returned map is keyed by canonical name.
template <typename T>
std::map<std::string, Var<T>> stage_weights(Tape<T>& t, const ModelState<T>& m, bool requires_grad) {
    std::map<std::string, Var<T>> wv;
    for (const auto& [name, w] : m.weights) wv[name] = t.input(w, requires_grad);
    return wv;
}

template <typename T>
struct ForwardTrace {
    Tensor<T> image;
    std::vector<Tensor<T>> taps;
};

template <typename T>
ForwardTrace<T> forward(const ModelState<T>& m, const Tensor<T>& z, std::optional<int> class_id,
                        double t_const = 0.0) {
    Tape<T> t;
    auto wv = stage_weights(t, m, false);
    auto gv = build_forward(t, wv, m.cfg, t.constant(z), class_id, t_const);
    ForwardTrace<T> out;
    out.image = t.val(gv.image);
    out.taps.reserve(gv.taps.size());
    for (auto tap : gv.taps) out.taps.push_back(t.val(tap));
    return out;
}

template <typename T>
Tensor<T> decode_tokens(const ModelState<T>& m, const Tensor<T>& tokens, std::optional<int> class_id,
                        double t_const = 0.0) {
    Tape<T> t;
    auto wv = stage_weights(t, m, false);
    if (class_id && (*class_id < 0 || *class_id >= m.cfg.num_classes))
        throw ConfigError("class id outside range");
    Var<T> t_freq = t.constant(timestep_frequencies<T>(t_const));
    Var<T> t_emb = model_detail::linear(
        t, silu(t, model_detail::linear(t, t_freq, wv.at("t_embed.fc1.weight"), wv.at("t_embed.fc1.bias"))),
        wv.at("t_embed.fc2.weight"), wv.at("t_embed.fc2.bias"));
    int row = class_id ? *class_id : m.cfg.num_classes;
    Var<T> cond_act = silu(t, add(t, t_emb, embed_row(t, wv.at("label_embed.table"), row)));
    return t.val(build_decode_head(t, wv, m.cfg, t.constant(tokens), cond_act));
}

// Classifier-free guidance: uncond + s * (cond - uncond). s=1 returns cond
// exactly; s=0 returns uncond.
template <typename T>
Tensor<T> cfg_guide(const Tensor<T>& cond, const Tensor<T>& uncond, double s) {
    if (!cond.same_shape(uncond))
        throw ShapeError("cfg_guide: shape mismatch " + cond.shape_str() + " vs " + uncond.shape_str());
    if (s == 1.0) return cond;
    if (s == 0.0) return uncond;
    Tensor<T> out(cond.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = uncond[i] + static_cast<T>(s) * (cond[i] - uncond[i]);
    return out;
}

// ---- EMA ----

template <typename T>
struct EmaState {
    std::map<std::string, Tensor<T>> shadow;
    double decay = 0.9999;
};

template <typename T>
EmaState<T> ema_init(const ModelState<T>& m, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must lie in [0,1]");
    EmaState<T> e;
    e.decay = decay;
    e.shadow = m.weights;
    return e;
}

template <typename T>
void ema_update(EmaState<T>& e, const ModelState<T>& m) {
    if (e.shadow.size() != m.weights.size())
        throw StateError("ema_update: shadow has " + std::to_string(e.shadow.size()) +
                         " tensors, model has " + std::to_string(m.weights.size()));
    const T d = static_cast<T>(e.decay);
    for (auto& [name, sh] : e.shadow) {
        auto it = m.weights.find(name);
        if (it == m.weights.end()) throw StateError("ema_update: model lacks tensor " + name);
        const Tensor<T>& live = it->second;
        if (!sh.same_shape(live)) throw StateError("ema_update: shape drift on " + name);
        for (int64_t i = 0; i < sh.numel(); ++i) sh[i] = d * sh[i] + (T(1) - d) * live[i];
    }
}

template <typename T>
ModelState<T> ema_snapshot(const EmaState<T>& e, const DitConfig& cfg) {
    ModelState<T> m;
    m.cfg = cfg;
    m.weights = e.shadow;
    return m;
}

} // namespace ditforge
