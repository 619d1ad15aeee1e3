#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/io.hpp"
#include "ditforge/metrics.hpp"
#include "ditforge/model.hpp"
#include "ditforge/parallel.hpp"
#include "ditforge/rng.hpp"
#include "ditforge/schedules.hpp"

namespace ditforge {

// ---- synthetic teacher ----

// Deterministic (seed, class, index)-addressable pairs: z is iid standard
// normal; x = tanh(M_c * blur(z)) where M_c is a fixed per-class channel
// mixing matrix and blur is a twice-applied 5x5 binomial filter with
// replicated borders. The blur guarantees x is visibly smoother than z (its
// high-frequency energy shrinks) and tanh bounds it to (-1, 1).
class SynthPairSource final : public PairSource {
public:
    SynthPairSource(int64_t n, uint64_t seed, int64_t image, int64_t channels, int num_classes)
        : n_(n), seed_(seed), image_(image), channels_(channels), classes_(num_classes) {
        if (n < 1) throw ConfigError("synth pairs: need n >= 1");
        if (image < 1 || channels < 1 || num_classes < 1)
            throw ConfigError("synth pairs: bad geometry");
    }

    int64_t size() const override { return n_; }
    int64_t height() const override { return image_; }
    int64_t width() const override { return image_; }
    int64_t channels() const override { return channels_; }

    TeacherPair at(int64_t i) const override {
        if (i < 0 || i >= n_) throw StateError("synth pair index out of range");
        TeacherPair p;
        p.class_id = static_cast<int>(i % classes_);
        Rng zr(mix_seed(seed_, mix_seed(0x5a17u, static_cast<uint64_t>(i))));
        p.z = Tensor<float>({channels_, image_, image_});
        for (int64_t k = 0; k < p.z.numel(); ++k) p.z[k] = static_cast<float>(zr.normal());
        p.x = clean_from(p.z, p.class_id);
        return p;
    }

private:
    Tensor<float> clean_from(const Tensor<float>& z, int cls) const {
        Tensor<float> b = blur(blur(z));
        // Per-class channel mix, rows scaled to unit L2 norm then boosted so
        // tanh has visible contrast.
        Rng mr(mix_seed(0x4d431000u + static_cast<uint64_t>(cls), 0x9c0ffeeULL));
        std::vector<float> mix(static_cast<size_t>(channels_ * channels_));
        for (int64_t r = 0; r < channels_; ++r) {
            double norm = 0;
            for (int64_t c = 0; c < channels_; ++c) {
                double v = mr.uniform(-1.0, 1.0);
                mix[static_cast<size_t>(r * channels_ + c)] = static_cast<float>(v);
                norm += v * v;
            }
            norm = std::sqrt(norm);
            if (norm < 1e-9) norm = 1.0;
            for (int64_t c = 0; c < channels_; ++c)
                mix[static_cast<size_t>(r * channels_ + c)] =
                    static_cast<float>(1.5 * mix[static_cast<size_t>(r * channels_ + c)] / norm);
        }
        Tensor<float> x({channels_, image_, image_});
        for (int64_t y = 0; y < image_; ++y)
            for (int64_t xx = 0; xx < image_; ++xx)
                for (int64_t r = 0; r < channels_; ++r) {
                    double s = 0;
                    for (int64_t c = 0; c < channels_; ++c)
                        s += mix[static_cast<size_t>(r * channels_ + c)] * b.at(c, y, xx);
                    x.at(r, y, xx) = static_cast<float>(std::tanh(s));
                }
        return x;
    }

    Tensor<float> blur(const Tensor<float>& img) const {
        static const double k[5] = {1, 4, 6, 4, 1};
        Tensor<float> out(img.shape());
        Tensor<float> tmp(img.shape());
        const int64_t H = img.dim(1), W = img.dim(2);
        auto clamp = [](int64_t v, int64_t hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
        for (int64_t c = 0; c < channels_; ++c) {
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double s = 0;
                    for (int j = -2; j <= 2; ++j) s += k[j + 2] * img.at(c, y, clamp(x + j, W));
                    tmp.at(c, y, x) = static_cast<float>(s / 16.0);
                }
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    double s = 0;
                    for (int j = -2; j <= 2; ++j) s += k[j + 2] * tmp.at(c, clamp(y + j, H), x);
                    out.at(c, y, x) = static_cast<float>(s / 16.0);
                }
        }
        return out;
    }

    int64_t n_;
    uint64_t seed_;
    int64_t image_, channels_;
    int classes_;
};

// ---- losses ----

template <typename T>
struct LossResult {
    T value = T(0);
    std::map<std::string, Tensor<T>> grads; // per weight; 'aux/expansion' when learned
    std::vector<std::pair<std::string, T>> terms;
};

namespace loss_detail {

template <typename T>
void collect_grads(Tape<T>& tape, const std::map<std::string, Var<T>>& wv, LossResult<T>& out) {
    for (const auto& [name, var] : wv) {
        if (!tape.needs_grad(var)) continue;
        if (tape.grad_touched(var)) {
            out.grads[name] = tape.grad(var);
        } else {
            out.grads[name] = Tensor<T>(tape.val(var).shape());
        }
    }
}

template <typename T>
Var<T> stage_pair_image(Tape<T>& t, const Tensor<float>& img) {
    return t.constant(img.template cast<T>());
}

} // namespace loss_detail

// Plain distillation: d(x, student(z, c)).
template <typename T>
LossResult<T> loss_get(const DistanceMetric<T>& metric, const ModelState<T>& student,
                       const TeacherPair& pair) {
    Tape<T> tape;
    auto wv = stage_weights(tape, student, true);
    std::optional<int> cls = pair.class_id < 0 ? std::nullopt : std::optional<int>(pair.class_id);
    auto gv = build_forward(tape, wv, student.cfg, loss_detail::stage_pair_image(tape, pair.z), cls);
    Var<T> loss = metric.build(tape, loss_detail::stage_pair_image(tape, pair.x), gv.image);
    tape.backward(loss);
    LossResult<T> out;
    out.value = tape.val(loss)[0];
    out.terms.push_back({"get", out.value});
    loss_detail::collect_grads(tape, wv, out);
    return out;
}

// Teaching-assistant setup: a frozen wider model, a learned [w_s, w_ta]
// expansion projection, and term weights. Layer indices are 1-based;
// 0 selects the penultimate layer of each model (depth-1, or the only layer
// when depth is 1).
template <typename T>
struct TaSetup {
    ModelState<T> ta;
    Tensor<T> expansion;
    double lambda0 = 1.0, lambda1 = 1.0, lambda2 = 1.0;
    int student_layer = 0;
    int ta_layer = 0;

    static int resolve_layer(int requested, int depth) {
        int l = requested > 0 ? requested : (depth > 1 ? depth - 1 : 1);
        if (l < 1 || l > depth)
            throw ConfigError("matched layer " + std::to_string(requested) + " invalid for depth " +
                              std::to_string(depth));
        return l;
    }

    void validate(const DitConfig& student_cfg) const {
        ta.cfg.validate();
        if (expansion.rank() != 2 || expansion.dim(0) != student_cfg.width ||
            expansion.dim(1) != ta.cfg.width)
            throw ShapeError("expansion must be [student width, ta width], got " + expansion.shape_str());
        resolve_layer(student_layer, student_cfg.depth);
        resolve_layer(ta_layer, ta.cfg.depth);
        if (ta.cfg.image != student_cfg.image || ta.cfg.in_channels != student_cfg.in_channels)
            throw ConfigError("ta and student must share image geometry");
    }
};

template <typename T>
TaSetup<T> make_ta_setup(ModelState<T> ta, const DitConfig& student_cfg, uint64_t seed,
                         double l0 = 1.0, double l1 = 1.0, double l2 = 1.0) {
    TaSetup<T> s;
    s.ta = std::move(ta);
    s.lambda0 = l0;
    s.lambda1 = l1;
    s.lambda2 = l2;
    s.expansion = Tensor<T>({student_cfg.width, s.ta.cfg.width});
    Rng rng = named_stream(seed, "aux/expansion");
    for (int64_t i = 0; i < s.expansion.numel(); ++i)
        s.expansion[i] = static_cast<T>(rng.trunc_normal(0.02));
    s.validate(student_cfg);
    return s;
}

// L = l0 d(x, xs) + l1 d(x_ta, xs) + l2 d(expand(tap_s), tap_ta).
// Terms with a zero weight are never built, so (1,0,0) constructs exactly
// the loss_get graph. The TA is staged frozen: no gradients reach it.
template <typename T>
LossResult<T> loss_ta(const DistanceMetric<T>& metric, const ModelState<T>& student,
                      const TaSetup<T>& setup, const TeacherPair& pair) {
    setup.validate(student.cfg);
    Tape<T> tape;
    auto wv = stage_weights(tape, student, true);
    std::optional<int> cls = pair.class_id < 0 ? std::nullopt : std::optional<int>(pair.class_id);
    auto gv = build_forward(tape, wv, student.cfg, loss_detail::stage_pair_image(tape, pair.z), cls);

    LossResult<T> out;
    Var<T> total{};
    auto push_term = [&](const char* name, double lambda, Var<T> term) {
        out.terms.push_back({name, tape.val(term)[0]});
        Var<T> weighted = lambda == 1.0 ? term : scale(tape, term, static_cast<T>(lambda));
        total = total.valid() ? add(tape, total, weighted) : weighted;
    };

    if (setup.lambda0 != 0.0) {
        push_term("data", setup.lambda0,
                  metric.build(tape, loss_detail::stage_pair_image(tape, pair.x), gv.image));
    }
    Var<T> expansion_var{};
    if (setup.lambda1 != 0.0 || setup.lambda2 != 0.0) {
        auto ta_wv = stage_weights(tape, setup.ta, false);
        auto ta_gv = build_forward(tape, ta_wv, setup.ta.cfg,
                                   loss_detail::stage_pair_image(tape, pair.z), cls);
        if (setup.lambda1 != 0.0)
            push_term("ta_output", setup.lambda1, metric.build(tape, ta_gv.image, gv.image));
        if (setup.lambda2 != 0.0) {
            int ls = TaSetup<T>::resolve_layer(setup.student_layer, student.cfg.depth);
            int lt = TaSetup<T>::resolve_layer(setup.ta_layer, setup.ta.cfg.depth);
            expansion_var = tape.input(setup.expansion, true);
            Var<T> projected = matmul(tape, gv.taps[static_cast<size_t>(ls - 1)], expansion_var);
            Var<T> diff = sub(tape, projected, ta_gv.taps[static_cast<size_t>(lt - 1)]);
            push_term("feature", setup.lambda2, mean_all(tape, square(tape, diff)));
        }
    }
    if (!total.valid()) throw ConfigError("loss_ta: all term weights are zero");

    tape.backward(total);
    out.value = tape.val(total)[0];
    loss_detail::collect_grads(tape, wv, out);
    if (expansion_var.valid()) {
        out.grads["aux/expansion"] =
            tape.grad_touched(expansion_var) ? tape.grad(expansion_var) : Tensor<T>(setup.expansion.shape());
    }
    return out;
}

// Intermediate supervision: every planned layer's tap is decoded with the
// shared head and pulled toward the schedule state at its listed time.
template <typename T>
LossResult<T> loss_mi1(const DistanceMetric<T>& metric, const ModelState<T>& student,
                       const ScheduleSpec& sched, const Mi1Plan& plan, const TeacherPair& pair) {
    plan.validate(student.cfg.depth);
    Tape<T> tape;
    auto wv = stage_weights(tape, student, true);
    std::optional<int> cls = pair.class_id < 0 ? std::nullopt : std::optional<int>(pair.class_id);
    auto gv = build_forward(tape, wv, student.cfg, loss_detail::stage_pair_image(tape, pair.z), cls);

    auto targets =
        mi1_targets(sched, plan, pair.z.template cast<T>(), pair.x.template cast<T>());

    LossResult<T> out;
    Var<T> total{};
    for (size_t i = 0; i < targets.size(); ++i) {
        int layer = targets[i].first;
        Var<T> decoded = build_decode_head(tape, wv, student.cfg,
                                           gv.taps[static_cast<size_t>(layer - 1)], gv.cond_act);
        Var<T> term = metric.build(tape, tape.constant(targets[i].second), decoded);
        out.terms.push_back({"l=" + std::to_string(layer), tape.val(term)[0]});
        total = total.valid() ? add(tape, total, term) : term;
    }
    tape.backward(total);
    out.value = tape.val(total)[0];
    loss_detail::collect_grads(tape, wv, out);
    return out;
}

// ---- optimizer ----

// AdamW with the weight decay decoupled from the learning rate:
//   theta <- (1 - wd) theta - lr * mhat / (sqrt(vhat) + eps)
// so lr = 0 still applies pure decay.
template <typename T>
struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t step_count = 0;
    std::map<std::string, Tensor<T>> m, v;

    void step(std::map<std::string, Tensor<T>*> params, const std::map<std::string, Tensor<T>>& grads) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (auto& [name, theta] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) throw StateError("optimizer: no gradient for " + name);
            const Tensor<T>& g = git->second;
            Tensor<T>& mm = m.try_emplace(name, Tensor<T>(theta->shape())).first->second;
            Tensor<T>& vv = v.try_emplace(name, Tensor<T>(theta->shape())).first->second;
            for (int64_t i = 0; i < theta->numel(); ++i) {
                double gi = static_cast<double>(g[i]);
                double mi = beta1 * static_cast<double>(mm[i]) + (1.0 - beta1) * gi;
                double vi = beta2 * static_cast<double>(vv[i]) + (1.0 - beta2) * gi * gi;
                mm[i] = static_cast<T>(mi);
                vv[i] = static_cast<T>(vi);
                double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                (*theta)[i] = static_cast<T>((1.0 - weight_decay) * static_cast<double>((*theta)[i]) - update);
            }
        }
    }
};

// ---- trainer ----

enum class TrainMethod { Get, Ta, Mi1 };

struct TrainConfig {
    TrainMethod method = TrainMethod::Get;
    double lr = 1e-4;
    double weight_decay = 0.01;
    int batch = 32;
    int epochs = 100;
    int64_t max_steps = -1; // caps epoch-derived step count when >= 0
    double ema_decay = 0.9999;
    double cfg_dropout = 0.1;
    uint64_t seed = 0;
    MetricSpec metric{};
};

struct CurvePoint {
    int64_t step = 0;
    double loss = 0.0;
    double ema_loss = 0.0;
    std::vector<std::pair<std::string, double>> terms;
};

template <typename T>
struct TrainResult {
    ModelState<T> model;
    EmaState<T> ema;
    std::optional<Tensor<T>> expansion; // ta method only
    std::vector<CurvePoint> curve;
    std::optional<int64_t> diverged_at;
};

// Step callback fires after each optimizer update with the live weights.
template <typename T>
using StepCallback = std::function<void(int64_t step, const ModelState<T>&)>;

// Offline distillation loop. Per epoch the pair indices are reshuffled with
// a seeded generator; per step a batch is evaluated sample-by-sample on
// independent tapes (parallel across a chunk, gradients merged in sample
// order, so the result is bit-identical for any worker count), averaged,
// and applied with AdamW. Class conditioning is dropped per-sample with
// probability cfg_dropout, decided by a serial draw before dispatch. A
// non-finite loss or gradient stops training before the update, so the
// returned weights are the last good ones.
template <typename T>
TrainResult<T> train(const TrainConfig& tc, const PairSource& data, ModelState<T> init,
                     const TaSetup<T>* ta_setup = nullptr, const Mi1Plan* mi1_plan = nullptr,
                     const ScheduleSpec& sched = {}, const StepCallback<T>& on_step = {}) {
    init.cfg.validate();
    if (tc.batch < 1) throw ConfigError("train: batch must be >= 1");
    if (tc.epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (!(tc.cfg_dropout >= 0.0 && tc.cfg_dropout <= 1.0))
        throw ConfigError("train: cfg_dropout must lie in [0,1]");
    if (tc.method == TrainMethod::Ta && !ta_setup) throw ConfigError("train: ta method needs a TA setup");
    if (tc.method == TrainMethod::Mi1 && !mi1_plan) throw ConfigError("train: mi1 method needs a plan");
    if (data.height() != init.cfg.image || data.width() != init.cfg.image ||
        data.channels() != init.cfg.in_channels)
        throw ConfigError("train: pair geometry " + std::to_string(data.channels()) + "x" +
                          std::to_string(data.height()) + "x" + std::to_string(data.width()) +
                          " does not match model " + init.cfg.describe());

    auto metric = make_metric<T>(tc.metric);
    TaSetup<T> ta_local;
    if (ta_setup) {
        ta_local = *ta_setup;
        ta_local.validate(init.cfg);
    }
    if (mi1_plan) mi1_plan->validate(init.cfg.depth);

    TrainResult<T> out;
    out.ema = ema_init(init, tc.ema_decay);

    AdamW<T> opt;
    opt.lr = tc.lr;
    opt.weight_decay = tc.weight_decay;

    const int64_t n = data.size();
    const int64_t steps_per_epoch = (n + tc.batch - 1) / tc.batch;
    int64_t total_steps = steps_per_epoch * tc.epochs;
    if (tc.max_steps >= 0) total_steps = std::min(total_steps, tc.max_steps);

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(mix_seed(tc.seed, fnv1a("shuffle")));
    Rng dropout_rng(mix_seed(tc.seed, fnv1a("cfg_dropout")));

    double ema_loss = 0.0;
    const double curve_decay = 0.9;
    int64_t step = 0;
    for (int64_t epoch = 0; step < total_steps; ++epoch) {
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)))]);
        for (int64_t b = 0; b < steps_per_epoch && step < total_steps; ++b, ++step) {
            int64_t lo = b * tc.batch;
            int64_t hi = std::min<int64_t>(lo + tc.batch, n);
            int64_t bs = hi - lo;

            std::vector<TeacherPair> batch(static_cast<size_t>(bs));
            for (int64_t s = 0; s < bs; ++s) {
                batch[static_cast<size_t>(s)] = data.at(order[static_cast<size_t>(lo + s)]);
                if (batch[static_cast<size_t>(s)].class_id >= 0 && dropout_rng.uniform() < tc.cfg_dropout)
                    batch[static_cast<size_t>(s)].class_id = -1;
            }

            std::vector<LossResult<T>> results(static_cast<size_t>(bs));
            parallel_for(bs, [&](int64_t s) {
                const TeacherPair& pair = batch[static_cast<size_t>(s)];
                switch (tc.method) {
                    case TrainMethod::Get:
                        results[static_cast<size_t>(s)] = loss_get(*metric, init, pair);
                        break;
                    case TrainMethod::Ta:
                        results[static_cast<size_t>(s)] = loss_ta(*metric, init, ta_local, pair);
                        break;
                    case TrainMethod::Mi1:
                        results[static_cast<size_t>(s)] = loss_mi1(*metric, init, sched, *mi1_plan, pair);
                        break;
                }
            });

            // Fold in sample order; scale by 1/bs for the batch mean.
            double loss = 0.0;
            std::map<std::string, Tensor<T>> grads;
            std::vector<std::pair<std::string, double>> terms;
            const T inv = T(1) / static_cast<T>(bs);
            for (int64_t s = 0; s < bs; ++s) {
                LossResult<T>& r = results[static_cast<size_t>(s)];
                loss += static_cast<double>(r.value);
                for (auto& [name, g] : r.grads) {
                    auto it = grads.try_emplace(name, g.shape()).first;
                    for (int64_t k = 0; k < g.numel(); ++k) it->second[k] += g[k] * inv;
                }
                for (size_t ti = 0; ti < r.terms.size(); ++ti) {
                    if (terms.size() <= ti) terms.push_back({r.terms[ti].first, 0.0});
                    terms[ti].second += static_cast<double>(r.terms[ti].second) / static_cast<double>(bs);
                }
            }
            loss /= static_cast<double>(bs);

            bool finite = std::isfinite(loss);
            for (auto& [name, g] : grads) {
                if (!finite) break;
                for (int64_t k = 0; k < g.numel() && finite; ++k) finite = std::isfinite(static_cast<double>(g[k]));
            }
            if (!finite) {
                out.diverged_at = step;
                break;
            }

            std::map<std::string, Tensor<T>*> params;
            for (auto& [name, w] : init.weights) params[name] = &w;
            if (tc.method == TrainMethod::Ta && ta_local.lambda2 != 0.0)
                params["aux/expansion"] = &ta_local.expansion;
            opt.step(params, grads);

            ema_update(out.ema, init);
            ema_loss = step == 0 ? loss : curve_decay * ema_loss + (1.0 - curve_decay) * loss;
            out.curve.push_back({step, loss, ema_loss, terms});
            if (on_step) on_step(step, init);
        }
        if (out.diverged_at) break;
        if (n == 0) break;
    }

    out.model = std::move(init);
    if (tc.method == TrainMethod::Ta) out.expansion = ta_local.expansion;
    return out;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve);

} // namespace ditforge
