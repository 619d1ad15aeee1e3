#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "ditforge/rng.hpp"
#include "ditforge/tape.hpp"

using namespace ditforge;

namespace {

Tensor<double> random_tensor(std::vector<int64_t> shape, Rng& rng, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-hi, hi);
    return t;
}

// Scalar-valued graph builder taking the staged inputs.
using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

double eval_at(const std::vector<Tensor<double>>& xs, const Builder& f) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.input(x));
    Var<double> out = f(tape, vars);
    REQUIRE(tape.val(out).numel() == 1);
    return tape.val(out)[0];
}

// Central-difference check of every element of every input, in double.
void gradcheck(std::vector<Tensor<double>> xs, const Builder& f, double rtol = 1e-5,
               double atol = 1e-8, double h = 1e-6) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.input(x));
    Var<double> out = f(tape, vars);
    tape.backward(out);

    for (size_t i = 0; i < xs.size(); ++i) {
        REQUIRE(tape.grad_touched(vars[i]));
        const Tensor<double>& g = tape.grad(vars[i]);
        for (int64_t j = 0; j < xs[i].numel(); ++j) {
            std::vector<Tensor<double>> up = xs, dn = xs;
            up[i][j] += h;
            dn[i][j] -= h;
            double fd = (eval_at(up, f) - eval_at(dn, f)) / (2 * h);
            double err = std::abs(g[j] - fd);
            double tol = atol + rtol * std::max(std::abs(g[j]), std::abs(fd));
            INFO("input ", i, " elem ", j, " analytic=", g[j], " fd=", fd);
            CHECK(err <= tol);
        }
    }
}

// Random positive weights make the reduction sensitive to every element.
Builder weighted_sum_of(std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> op,
                        uint64_t seed = 7) {
    return [op, seed](Tape<double>& t, const std::vector<Var<double>>& in) {
        Var<double> y = op(t, in);
        Rng rng(seed);
        Tensor<double> w(t.val(y).shape());
        for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.25, 1.0);
        return sum_all(t, mul(t, y, t.constant(w)));
    };
}

} // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(11);
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({3, 4}, rng);

    gradcheck({a, b}, weighted_sum_of([](auto& t, const auto& in) { return add(t, in[0], in[1]); }));
    gradcheck({a, b}, weighted_sum_of([](auto& t, const auto& in) { return sub(t, in[0], in[1]); }));
    gradcheck({a, b}, weighted_sum_of([](auto& t, const auto& in) { return mul(t, in[0], in[1]); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return scale(t, in[0], 2.75); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return add_scalar(t, in[0], -1.5); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return square(t, in[0]); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return gelu(t, in[0]); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return silu(t, in[0]); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return mean_all(t, in[0]); }));
}

TEST_CASE("kinked ops differentiate away from the kink") {
    Rng rng(12);
    Tensor<double> a = random_tensor({4, 3}, rng);
    for (int64_t i = 0; i < a.numel(); ++i)
        if (std::abs(a[i]) < 0.05) a[i] = 0.3;
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return relu(t, in[0]); }));
    gradcheck({a}, weighted_sum_of([](auto& t, const auto& in) { return abs_val(t, in[0]); }));
}

TEST_CASE("matmul matches Eigen forward and finite differences backward") {
    Rng rng(13);
    Tensor<double> a = random_tensor({3, 5}, rng);
    Tensor<double> b = random_tensor({5, 4}, rng);

    Tape<double> tape;
    Var<double> va = tape.input(a), vb = tape.input(b);
    Var<double> y = matmul(tape, va, vb);
    Eigen::MatrixXd ea = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(a.data(), 3, 5);
    Eigen::MatrixXd eb = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(b.data(), 5, 4);
    Eigen::MatrixXd ref = ea * eb;
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j)
            CHECK(tape.val(y).at(i, j) == doctest::Approx(ref(i, j)).epsilon(1e-12));

    gradcheck({a, b}, weighted_sum_of([](auto& t, const auto& in) { return matmul(t, in[0], in[1]); }));
}

TEST_CASE("row-vector broadcast ops") {
    Rng rng(14);
    Tensor<double> a = random_tensor({4, 6}, rng);
    Tensor<double> v = random_tensor({6}, rng);
    gradcheck({a, v},
              weighted_sum_of([](auto& t, const auto& in) { return add_rowvec(t, in[0], in[1]); }));
    gradcheck({a, v},
              weighted_sum_of([](auto& t, const auto& in) { return mul_rowvec(t, in[0], in[1]); }));
}

TEST_CASE("slice_cols and embed_row route gradients to the right places") {
    Rng rng(15);
    Tensor<double> a = random_tensor({3, 8}, rng);
    gradcheck({a},
              weighted_sum_of([](auto& t, const auto& in) { return slice_cols(t, in[0], 2, 4); }));

    Tensor<double> table = random_tensor({5, 4}, rng);
    gradcheck({table},
              weighted_sum_of([](auto& t, const auto& in) { return embed_row(t, in[0], 3); }));

    // Rows other than the embedded one receive exactly zero.
    Tape<double> tape;
    Var<double> vt = tape.input(table);
    tape.backward(sum_all(tape, embed_row(tape, vt, 3)));
    const Tensor<double>& g = tape.grad(vt);
    for (int64_t r = 0; r < 5; ++r)
        for (int64_t c = 0; c < 4; ++c) CHECK(g.at(r, c) == (r == 3 ? 1.0 : 0.0));
}

TEST_CASE("layernorm_rows: unit stats forward, finite differences backward") {
    Rng rng(16);
    Tensor<double> a = random_tensor({3, 7}, rng, 2.0);
    Tape<double> tape;
    Var<double> va = tape.input(a);
    Var<double> y = layernorm_rows(tape, va, 1e-6);
    for (int64_t r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (int64_t c = 0; c < 7; ++c) mean += tape.val(y).at(r, c);
        mean /= 7;
        for (int64_t c = 0; c < 7; ++c) var += std::pow(tape.val(y).at(r, c) - mean, 2);
        var /= 7;
        CHECK(std::abs(mean) < 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
    gradcheck({a},
              weighted_sum_of([](auto& t, const auto& in) { return layernorm_rows(t, in[0], 1e-6); }),
              1e-4, 1e-7);
}

TEST_CASE("softmax_row_sorted produces a normalized, order-preserving distribution") {
    Rng rng(17);
    std::vector<double> in(9), out(9), scratch;
    for (auto& x : in) x = rng.uniform(-4.0, 4.0);
    detail::softmax_row_sorted(in.data(), out.data(), 9, scratch);
    double sum = 0;
    for (double p : out) {
        CHECK(p > 0);
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    for (size_t i = 0; i < 9; ++i)
        for (size_t j = 0; j < 9; ++j)
            if (in[i] < in[j]) CHECK(out[i] < out[j]);

    // Large logits must not overflow.
    std::vector<double> big = {1000.0, 1001.0, 999.0}, bout(3);
    detail::softmax_row_sorted(big.data(), bout.data(), 3, scratch);
    CHECK(bout[0] + bout[1] + bout[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::isfinite(bout[1]));
}

TEST_CASE("attention gradients match finite differences") {
    Rng rng(18);
    Tensor<double> q = random_tensor({5, 6}, rng);
    Tensor<double> k = random_tensor({5, 6}, rng);
    Tensor<double> v = random_tensor({5, 6}, rng);
    double sc = 1.0 / std::sqrt(3.0);
    gradcheck({q, k, v},
              weighted_sum_of([sc](auto& t, const auto& in) {
                  return attention(t, in[0], in[1], in[2], 2, sc);
              }),
              1e-4, 1e-7);
}

TEST_CASE("patchify/unpatchify round trip and gradients") {
    Rng rng(19);
    Tensor<double> img = random_tensor({3, 8, 8}, rng);

    Tape<double> tape;
    Var<double> vi = tape.input(img);
    Var<double> tokens = patchify(tape, vi, 2);
    CHECK(tape.val(tokens).shape() == std::vector<int64_t>{16, 12});
    Var<double> back = unpatchify(tape, tokens, 2, 3, 8, 8);
    CHECK(bitwise_equal(tape.val(back), img));

    // Token layout: token (gy,gx), feature (c,py,px).
    CHECK(tape.val(tokens).at(1, 0) == img.at(0, 0, 2));
    CHECK(tape.val(tokens).at(4, 0) == img.at(0, 2, 0));
    CHECK(tape.val(tokens).at(0, 1) == img.at(0, 0, 1));
    CHECK(tape.val(tokens).at(0, 2) == img.at(0, 1, 0));
    CHECK(tape.val(tokens).at(0, 4) == img.at(1, 0, 0));

    gradcheck({img},
              weighted_sum_of([](auto& t, const auto& in) { return patchify(t, in[0], 2); }));
    Tensor<double> tok = random_tensor({16, 12}, rng);
    gradcheck({tok}, weighted_sum_of([](auto& t, const auto& in) {
                  return unpatchify(t, in[0], 2, 3, 8, 8);
              }));
}

TEST_CASE("avgpool2 halves each spatial side and distributes gradient evenly") {
    Rng rng(20);
    Tensor<double> img = random_tensor({2, 6, 6}, rng);
    Tape<double> tape;
    Var<double> vi = tape.input(img);
    Var<double> y = avgpool2(tape, vi);
    CHECK(tape.val(y).shape() == std::vector<int64_t>{2, 3, 3});
    CHECK(tape.val(y).at(0, 0, 0) ==
          doctest::Approx((img.at(0, 0, 0) + img.at(0, 0, 1) + img.at(0, 1, 0) + img.at(0, 1, 1)) / 4));
    gradcheck({img}, weighted_sum_of([](auto& t, const auto& in) { return avgpool2(t, in[0]); }));
}

TEST_CASE("conv2d_fixed forward shape and input gradient") {
    Rng rng(21);
    Tensor<double> img = random_tensor({2, 5, 5}, rng);
    Tensor<double> kernel = random_tensor({3, 2, 3, 3}, rng);
    Tensor<double> bias = random_tensor({3}, rng);

    Tape<double> tape;
    Var<double> vi = tape.input(img);
    Var<double> y = conv2d_fixed(tape, vi, kernel, bias, 2, 1);
    CHECK(tape.val(y).shape() == std::vector<int64_t>{3, 3, 3});

    // Hand-computed output at (o=0, y=0, x=0): window rows/cols {-1,0,1} with zero pad.
    double want = bias[0];
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
                int64_t iy = ky - 1, ix = kx - 1;
                if (iy < 0 || ix < 0) continue;
                want += kernel[((0 * 2 + c) * 3 + ky) * 3 + kx] * img.at(c, iy, ix);
            }
    CHECK(tape.val(y).at(0, 0, 0) == doctest::Approx(want).epsilon(1e-12));

    gradcheck({img}, weighted_sum_of([kernel, bias](auto& t, const auto& in) {
                  return conv2d_fixed(t, in[0], kernel, bias, 2, 1);
              }));
}

TEST_CASE("requires_grad propagates through ops and constants stay untouched") {
    Tape<double> tape;
    Var<double> a = tape.input(Tensor<double>::full({2, 2}, 1.0));
    Var<double> c = tape.constant(Tensor<double>::full({2, 2}, 2.0));
    Var<double> both = mul(tape, a, c);
    CHECK(tape.needs_grad(both));
    Var<double> only_const = mul(tape, c, c);
    CHECK_FALSE(tape.needs_grad(only_const));

    tape.backward(sum_all(tape, both));
    CHECK(tape.grad_touched(a));
    CHECK_FALSE(tape.grad_touched(c));
    for (int64_t i = 0; i < 4; ++i) CHECK(tape.grad(a)[i] == 2.0);
}

TEST_CASE("grad of an input that does not reach the root stays untouched") {
    Tape<double> tape;
    Var<double> a = tape.input(Tensor<double>::full({3}, 1.5));
    Var<double> b = tape.input(Tensor<double>::full({3}, -0.5));
    tape.backward(sum_all(tape, square(tape, a)));
    CHECK(tape.grad_touched(a));
    CHECK_FALSE(tape.grad_touched(b));
}

TEST_CASE("backward is deterministic: identical graphs give bit-identical gradients") {
    auto run = [] {
        Rng rng(99);
        Tape<double> tape;
        Var<double> q = tape.input(random_tensor({6, 8}, rng));
        Var<double> k = tape.input(random_tensor({6, 8}, rng));
        Var<double> v = tape.input(random_tensor({6, 8}, rng));
        Var<double> w = tape.input(random_tensor({8, 8}, rng));
        Var<double> att = attention(tape, q, k, v, 4, 0.5);
        Var<double> y = matmul(tape, gelu(tape, att), w);
        tape.backward(mean_all(tape, square(tape, y)));
        std::vector<Tensor<double>> grads{tape.grad(q), tape.grad(k), tape.grad(v), tape.grad(w)};
        return grads;
    };
    auto g1 = run(), g2 = run();
    for (size_t i = 0; i < g1.size(); ++i) CHECK(bitwise_equal(g1[i], g2[i]));
}

TEST_CASE("gelu and silu match reference values") {
    Tape<double> tape;
    Tensor<double> x({3});
    x[0] = -1.0;
    x[1] = 0.0;
    x[2] = 2.0;
    Var<double> vx = tape.input(x);
    const Tensor<double>& g = tape.val(gelu(tape, vx));
    // tanh-form reference, evaluated independently.
    auto ref_gelu = [](double v) {
        return 0.5 * v * (1 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    };
    for (int64_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(ref_gelu(x[i])).epsilon(1e-12));

    const Tensor<double>& s = tape.val(silu(tape, vx));
    for (int64_t i = 0; i < 3; ++i)
        CHECK(s[i] == doctest::Approx(x[i] / (1 + std::exp(-x[i]))).epsilon(1e-12));
}

TEST_CASE("shape errors are raised eagerly") {
    Tape<double> tape;
    Var<double> a = tape.input(Tensor<double>::full({2, 3}, 1.0));
    Var<double> b = tape.input(Tensor<double>::full({3, 2}, 1.0));
    CHECK_THROWS_AS((void)add(tape, a, b), ShapeError);
    CHECK_THROWS_AS((void)matmul(tape, a, a), ShapeError);
    CHECK_THROWS_AS((void)attention(tape, a, a, a, 2, 1.0), ConfigError);
    Var<double> q4 = tape.input(Tensor<double>::full({2, 4}, 1.0));
    Var<double> k4 = tape.input(Tensor<double>::full({3, 4}, 1.0));
    CHECK_THROWS_AS((void)attention(tape, q4, k4, q4, 2, 1.0), ShapeError);
    Var<double> img = tape.input(Tensor<double>::full({3, 7, 7}, 0.0));
    CHECK_THROWS_AS((void)patchify(tape, img, 2), ShapeError);
}
