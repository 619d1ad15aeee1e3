#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ditforge/arch_plan.hpp"
#include "ditforge/model.hpp"
#include "ditforge/rng.hpp"

using namespace ditforge;

namespace {

DitConfig small_cfg() {
    DitConfig c;
    c.depth = 2;
    c.width = 16;
    c.heads = 4;
    c.patch = 2;
    c.image = 8;
    c.in_channels = 3;
    c.num_classes = 5;
    c.mlp_ratio = 4;
    return c;
}

Tensor<double> random_image(const DitConfig& c, uint64_t seed) {
    Tensor<double> z({c.in_channels, c.image, c.image});
    Rng rng(seed);
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = rng.normal();
    return z;
}

} // namespace

TEST_CASE("materialized weights match the schema and the closed-form count") {
    Rng pick(2024);
    for (int trial = 0; trial < 20; ++trial) {
        DitConfig c;
        c.depth = 1 + static_cast<int>(pick.below(6));
        c.width = 8 * (1 + static_cast<int>(pick.below(6)));
        c.heads = heads_for_width(c.width);
        c.patch = pick.below(2) ? 2 : 4;
        c.image = c.patch * (2 + static_cast<int>(pick.below(3)));
        c.in_channels = 1 + static_cast<int>(pick.below(4));
        c.num_classes = 2 + static_cast<int>(pick.below(20));
        c.mlp_ratio = pick.below(2) ? 2 : 4;
        CAPTURE(c.describe());

        auto schema = weight_schema(c);
        ModelState<double> m = init_model<double>(c, 7);
        REQUIRE(m.weights.size() == schema.size());
        int64_t schema_count = 0;
        for (const auto& [name, shape] : schema) {
            REQUIRE(m.weights.count(name) == 1);
            CHECK(m.weights.at(name).shape() == shape);
            schema_count += std::accumulate(shape.begin(), shape.end(), int64_t(1),
                                            std::multiplies<int64_t>());
        }
        CHECK(schema_count == count_params(c).total);
        CHECK(m.scalar_count() == count_params(c).total);
    }
}

TEST_CASE("init is deterministic in the seed and zero where adaLN-Zero demands") {
    DitConfig c = small_cfg();
    ModelState<double> a = init_model<double>(c, 42);
    ModelState<double> b = init_model<double>(c, 42);
    ModelState<double> other = init_model<double>(c, 43);

    bool any_diff = false;
    for (const auto& [name, w] : a.weights) {
        CHECK(bitwise_equal(w, b.weights.at(name)));
        if (!bitwise_equal(w, other.weights.at(name))) any_diff = true;
    }
    CHECK(any_diff);

    auto all_zero = [](const Tensor<double>& t) {
        for (int64_t i = 0; i < t.numel(); ++i)
            if (t[i] != 0.0) return false;
        return true;
    };
    for (const auto& [name, w] : a.weights) {
        bool zero_init = name.find(".bias") != std::string::npos ||
                         name.find("adaln") != std::string::npos ||
                         name.find("final.linear") != std::string::npos;
        CAPTURE(name);
        CHECK(all_zero(w) == zero_init);
    }
}

TEST_CASE("zero output at init, exactly") {
    DitConfig c = small_cfg();
    ModelState<double> m = init_model<double>(c, 1);
    Tensor<double> z = random_image(c, 5);
    for (auto cls : {std::optional<int>(3), std::optional<int>()}) {
        ForwardTrace<double> tr = forward(m, z, cls);
        REQUIRE(tr.image.shape() == z.shape());
        for (int64_t i = 0; i < tr.image.numel(); ++i) CHECK(tr.image[i] == 0.0);
    }
}

TEST_CASE("blocks are the identity at init: every tap equals the embedded input") {
    DitConfig c = small_cfg();
    ModelState<double> m = init_model<double>(c, 1);
    Tape<double> t;
    auto wv = stage_weights(t, m, false);
    auto gv = build_forward(t, wv, c, t.constant(random_image(c, 9)), 2);
    REQUIRE(gv.taps.size() == static_cast<size_t>(c.depth));
    for (auto tap : gv.taps) CHECK(bitwise_equal(t.val(tap), t.val(gv.tokens_in)));
}

TEST_CASE("trained-shape forward: taps count, shapes, decode head consistency") {
    DitConfig c = small_cfg();
    // Perturb every weight so the network is not the identity.
    ModelState<double> m = init_model<double>(c, 1);
    Rng rng(123);
    for (auto& [name, w] : m.weights)
        for (int64_t i = 0; i < w.numel(); ++i) w[i] += 0.05 * rng.normal();

    Tensor<double> z = random_image(c, 77);
    ForwardTrace<double> tr = forward(m, z, 1);
    REQUIRE(tr.taps.size() == static_cast<size_t>(c.depth));
    int64_t n_tokens = c.tokens();
    for (const auto& tap : tr.taps)
        CHECK(tap.shape() == std::vector<int64_t>{n_tokens, c.width});

    bool moved = false;
    for (int64_t i = 0; i < tr.image.numel() && !moved; ++i) moved = tr.image[i] != 0.0;
    CHECK(moved);

    // The final image is exactly the decode head applied to the last tap.
    Tensor<double> decoded = decode_tokens(m, tr.taps.back(), 1);
    CHECK(bitwise_equal(decoded, tr.image));
}

TEST_CASE("forward is bitwise deterministic") {
    DitConfig c = small_cfg();
    ModelState<double> m = init_model<double>(c, 3);
    Rng rng(5);
    for (auto& [name, w] : m.weights)
        for (int64_t i = 0; i < w.numel(); ++i) w[i] += 0.05 * rng.normal();
    Tensor<double> z = random_image(c, 6);
    ForwardTrace<double> a = forward(m, z, 0);
    ForwardTrace<double> b = forward(m, z, 0);
    CHECK(bitwise_equal(a.image, b.image));
    for (size_t i = 0; i < a.taps.size(); ++i) CHECK(bitwise_equal(a.taps[i], b.taps[i]));
}

TEST_CASE("token-permutation equivariance with zeroed positional embeddings") {
    DitConfig c = small_cfg();
    ModelState<float> m = init_model<float>(c, 11);
    Rng rng(17);
    for (auto& [name, w] : m.weights)
        for (int64_t i = 0; i < w.numel(); ++i) w[i] += 0.05f * static_cast<float>(rng.normal());
    m.weights.at("pos_embed").fill(0.0f);

    const int grid = c.image / c.patch;
    const int64_t n = static_cast<int64_t>(grid) * grid;
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), int64_t(0));
    Rng shuffle(23);
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[shuffle.below(static_cast<uint64_t>(i) + 1)]);

    Tensor<float> z({c.in_channels, c.image, c.image});
    Rng zr(29);
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(zr.normal());

    // zp places patch j of z at grid slot perm[j].
    Tensor<float> zp(z.shape());
    for (int64_t j = 0; j < n; ++j) {
        int64_t gy = j / grid, gx = j % grid;
        int64_t dy = perm[static_cast<size_t>(j)] / grid, dx = perm[static_cast<size_t>(j)] % grid;
        for (int64_t ch = 0; ch < c.in_channels; ++ch)
            for (int64_t py = 0; py < c.patch; ++py)
                for (int64_t px = 0; px < c.patch; ++px)
                    zp.at(ch, dy * c.patch + py, dx * c.patch + px) =
                        z.at(ch, gy * c.patch + py, gx * c.patch + px);
    }

    ForwardTrace<float> base = forward(m, z, 1);
    ForwardTrace<float> permuted = forward(m, zp, 1);

    // Taps permute by rows, bitwise.
    for (size_t b = 0; b < base.taps.size(); ++b)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t col = 0; col < c.width; ++col) {
                REQUIRE(permuted.taps[b].at(perm[static_cast<size_t>(j)], col) ==
                        base.taps[b].at(j, col));
            }

    // The decoded image permutes by patches, bitwise.
    for (int64_t j = 0; j < n; ++j) {
        int64_t gy = j / grid, gx = j % grid;
        int64_t dy = perm[static_cast<size_t>(j)] / grid, dx = perm[static_cast<size_t>(j)] % grid;
        for (int64_t ch = 0; ch < c.in_channels; ++ch)
            for (int64_t py = 0; py < c.patch; ++py)
                for (int64_t px = 0; px < c.patch; ++px)
                    REQUIRE(permuted.image.at(ch, dy * c.patch + py, dx * c.patch + px) ==
                            base.image.at(ch, gy * c.patch + py, gx * c.patch + px));
    }
}

TEST_CASE("class conditioning changes the output; invalid ids throw") {
    DitConfig c = small_cfg();
    ModelState<double> m = init_model<double>(c, 2);
    Rng rng(31);
    for (auto& [name, w] : m.weights)
        for (int64_t i = 0; i < w.numel(); ++i) w[i] += 0.05 * rng.normal();
    Tensor<double> z = random_image(c, 37);

    Tensor<double> a = forward(m, z, 0).image;
    Tensor<double> b = forward(m, z, 1).image;
    Tensor<double> u = forward(m, z, std::nullopt).image;
    CHECK_FALSE(bitwise_equal(a, b));
    CHECK_FALSE(bitwise_equal(a, u));

    CHECK_THROWS_AS((void)forward(m, z, -1), ConfigError);
    CHECK_THROWS_AS((void)forward(m, z, c.num_classes), ConfigError);
}

TEST_CASE("cfg_guide endpoints are exact and the formula is affine") {
    Tensor<double> cond({2, 2}), uncond({2, 2});
    Rng rng(41);
    for (int64_t i = 0; i < 4; ++i) {
        cond[i] = rng.normal();
        uncond[i] = rng.normal();
    }
    CHECK(bitwise_equal(cfg_guide(cond, uncond, 1.0), cond));
    CHECK(bitwise_equal(cfg_guide(cond, uncond, 0.0), uncond));
    Tensor<double> g = cfg_guide(cond, uncond, 2.5);
    for (int64_t i = 0; i < 4; ++i)
        CHECK(g[i] == doctest::Approx(uncond[i] + 2.5 * (cond[i] - uncond[i])).epsilon(1e-15));
    Tensor<double> bad({3});
    CHECK_THROWS_AS((void)cfg_guide(cond, bad, 1.0), ShapeError);
}

TEST_CASE("EMA endpoints, replay oracle, and state checks") {
    DitConfig c = small_cfg();
    ModelState<double> init = init_model<double>(c, 10);
    ModelState<double> moved = init;
    Rng rng(43);
    for (auto& [name, w] : moved.weights)
        for (int64_t i = 0; i < w.numel(); ++i) w[i] += rng.normal();

    // decay 1: shadow never moves.
    EmaState<double> hold = ema_init(init, 1.0);
    ema_update(hold, moved);
    for (const auto& [name, sh] : hold.shadow) CHECK(bitwise_equal(sh, init.weights.at(name)));

    // decay 0: shadow equals the live weights after one update.
    EmaState<double> track = ema_init(init, 0.0);
    ema_update(track, moved);
    for (const auto& [name, sh] : track.shadow) CHECK(bitwise_equal(sh, moved.weights.at(name)));

    // Replay: two updates at decay 0.5 against a hand-maintained shadow.
    EmaState<double> e = ema_init(init, 0.5);
    std::map<std::string, Tensor<double>> manual = init.weights;
    for (int step = 0; step < 2; ++step) {
        for (auto& [name, w] : moved.weights)
            for (int64_t i = 0; i < w.numel(); ++i) w[i] += 0.25;
        ema_update(e, moved);
        for (auto& [name, sh] : manual) {
            const Tensor<double>& live = moved.weights.at(name);
            for (int64_t i = 0; i < sh.numel(); ++i) sh[i] = 0.5 * sh[i] + (1.0 - 0.5) * live[i];
        }
    }
    for (const auto& [name, sh] : e.shadow) CHECK(bitwise_equal(sh, manual.at(name)));

    CHECK_THROWS_AS((void)ema_init(init, 1.5), ConfigError);
    CHECK_THROWS_AS((void)ema_init(init, -0.1), ConfigError);

    // Shape drift and missing tensors are state errors.
    EmaState<double> drift = ema_init(init, 0.5);
    ModelState<double> wrong = init;
    wrong.weights.at("pos_embed") = Tensor<double>({1, 1});
    CHECK_THROWS_AS(ema_update(drift, wrong), StateError);
    ModelState<double> missing = init;
    missing.weights.erase("pos_embed");
    CHECK_THROWS_AS(ema_update(drift, missing), StateError);
}

TEST_CASE("timestep frequency features") {
    Tensor<double> f0 = timestep_frequencies<double>(0.0);
    REQUIRE(f0.shape() == std::vector<int64_t>{1, 256});
    for (int i = 0; i < 128; ++i) {
        CHECK(f0[i] == 1.0);        // cos(0)
        CHECK(f0[128 + i] == 0.0);  // sin(0)
    }
    Tensor<double> f1 = timestep_frequencies<double>(0.9);
    CHECK(f1[0] == doctest::Approx(std::cos(0.9)).epsilon(1e-15));
    CHECK(f1[128] == doctest::Approx(std::sin(0.9)).epsilon(1e-15));
    // Frequencies decay geometrically toward 1e-4.
    double last = 0.9 * std::exp(-std::log(10000.0) * 127.0 / 128.0);
    CHECK(f1[127] == doctest::Approx(std::cos(last)).epsilon(1e-12));
}

TEST_CASE("cast round trip preserves float weights") {
    DitConfig c = small_cfg();
    ModelState<float> m = init_model<float>(c, 4);
    ModelState<double> up = m.cast<double>();
    ModelState<float> back = up.cast<float>();
    for (const auto& [name, w] : m.weights) CHECK(bitwise_equal(w, back.weights.at(name)));
}
