#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "ditforge/tensor.hpp"

namespace ditforge {

// Reverse-mode autodiff over Tensor<T>. Nodes live in a flat vector on the
// tape; a Var is an index into it. Backward closures receive the tape and
// their own node id so they never hold references into the node vector, which
// may reallocate while the graph grows.
//
// Determinism contract: every reduction an op performs over the token axis is
// either a fixed-order loop whose order does not depend on token identity
// (matmul accumulates over the contracted axis, never over tokens) or an
// order-independent sorted sum (attention softmax denominators and
// probability-weighted sums). Together with per-token pointwise ops this
// makes forward activations exactly equivariant under token permutation.

template <typename T>
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, int32_t)>;

    Var<T> input(Tensor<T> value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, nullptr);
    }

    Var<T> constant(Tensor<T> value) { return input(std::move(value), false); }

    // Builds an op node. requires_grad is the OR over parents; nodes that
    // cannot receive gradient drop their backward closure entirely.
    Var<T> emplace(Tensor<T> value, std::initializer_list<Var<T>> parents, BackFn back) {
        bool rg = false;
        for (Var<T> p : parents) rg = rg || nodes_[static_cast<size_t>(p.id)].requires_grad;
        return push(std::move(value), rg, rg ? std::move(back) : nullptr);
    }

    const Tensor<T>& val(Var<T> x) const { return nodes_[static_cast<size_t>(x.id)].value; }
    bool needs_grad(Var<T> x) const { return nodes_[static_cast<size_t>(x.id)].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // Gradient buffer, allocated as zeros on first touch. Valid inside
    // backward closures and after backward() returns.
    Tensor<T>& grad(Var<T> x) {
        Node& n = nodes_[static_cast<size_t>(x.id)];
        if (n.grad.numel() == 0 && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    bool grad_touched(Var<T> x) const { return nodes_[static_cast<size_t>(x.id)].grad.numel() > 0; }

    // Reverse sweep from a scalar root. Nodes whose gradient was never
    // touched are skipped; their parents receive nothing.
    void backward(Var<T> root) {
        Node& r = nodes_[static_cast<size_t>(root.id)];
        if (r.value.numel() != 1) throw ShapeError("backward: root must be scalar, got " + r.value.shape_str());
        if (!r.requires_grad) throw StateError("backward: root does not require grad");
        grad(root)[0] = T(1);
        for (int32_t id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.back || n.grad.numel() == 0) continue;
            n.back(*this, id);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackFn back;
        bool requires_grad = false;
    };

    Var<T> push(Tensor<T> value, bool rg, BackFn back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<int32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Stable softmax over one contiguous row; denominator summed in ascending
// value order so the result is invariant to any permutation of the inputs.
template <typename T>
inline void softmax_row_sorted(const T* in, T* out, int64_t n, std::vector<T>& scratch) {
    T m = in[0];
    for (int64_t j = 1; j < n; ++j) m = std::max(m, in[j]);
    scratch.resize(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - m);
        scratch[static_cast<size_t>(j)] = out[j];
    }
    std::sort(scratch.begin(), scratch.end());
    T denom = T(0);
    for (T v : scratch) denom += v;
    for (int64_t j = 0; j < n; ++j) out[j] /= denom;
}

} // namespace detail

// ---- elementwise ----

template <typename T>
Var<T> add(Tape<T>& t, Var<T> a, Var<T> b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    detail::check_same_shape(va, vb, "add");
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] + vb[i];
    return t.emplace(std::move(out), {a, b}, [a, b](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
Var<T> sub(Tape<T>& t, Var<T> a, Var<T> b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    detail::check_same_shape(va, vb, "sub");
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] - vb[i];
    return t.emplace(std::move(out), {a, b}, [a, b](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(Tape<T>& t, Var<T> a, Var<T> b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    detail::check_same_shape(va, vb, "mul");
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * vb[i];
    return t.emplace(std::move(out), {a, b}, [a, b](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            const auto& vb2 = tp.val(b);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
        }
        if (tp.needs_grad(b)) {
            auto& gb = tp.grad(b);
            const auto& va2 = tp.val(a);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va2[i];
        }
    });
}

template <typename T>
Var<T> scale(Tape<T>& t, Var<T> a, T c) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * c;
    return t.emplace(std::move(out), {a}, [a, c](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    });
}

template <typename T>
Var<T> add_scalar(Tape<T>& t, Var<T> a, T c) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] + c;
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

template <typename T>
Var<T> square(Tape<T>& t, Var<T> a) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] * va[i];
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        const auto& va2 = tp.val(a);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += T(2) * va2[i] * g[i];
    });
}

template <typename T>
Var<T> abs_val(Tape<T>& t, Var<T> a) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] < T(0) ? -va[i] : va[i];
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        const auto& va2 = tp.val(a);
        for (int64_t i = 0; i < g.numel(); ++i)
            ga[i] += va2[i] < T(0) ? -g[i] : (va2[i] > T(0) ? g[i] : T(0));
    });
}

template <typename T>
Var<T> relu(Tape<T>& t, Var<T> a) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        const auto& va2 = tp.val(a);
        for (int64_t i = 0; i < g.numel(); ++i)
            if (va2[i] > T(0)) ga[i] += g[i];
    });
}

// tanh-form gelu, matching the transformer MLP convention.
template <typename T>
Var<T> gelu(Tape<T>& t, Var<T> a) {
    constexpr double kC = 0.7978845608028653558798921198687; // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = static_cast<double>(va[i]);
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x))));
    }
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        const auto& va2 = tp.val(a);
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = static_cast<double>(va2[i]);
            double u = kC * (x + kA * x * x * x);
            double th = std::tanh(u);
            double du = kC * (1.0 + 3.0 * kA * x * x);
            double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
            ga[i] += static_cast<T>(d) * g[i];
        }
    });
}

template <typename T>
Var<T> silu(Tape<T>& t, Var<T> a) {
    const auto& va = t.val(a);
    Tensor<T> out(va.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = static_cast<double>(va[i]);
        out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
    }
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        const auto& va2 = tp.val(a);
        for (int64_t i = 0; i < g.numel(); ++i) {
            double x = static_cast<double>(va2[i]);
            double s = 1.0 / (1.0 + std::exp(-x));
            ga[i] += static_cast<T>(s * (1.0 + x * (1.0 - s))) * g[i];
        }
    });
}

// ---- linear algebra ----

// [m,k] x [k,n] -> [m,n]. Hand-rolled (i,k,j) loops: the contraction order is
// a fixed function of k alone, so row permutations of A permute rows of the
// result bitwise exactly.
template <typename T>
Var<T> matmul(Tape<T>& t, Var<T> a, Var<T> b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
        throw ShapeError("matmul: incompatible " + va.shape_str() + " x " + vb.shape_str());
    const int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        T* orow = out.data() + i * n;
        const T* arow = va.data() + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            T av = arow[kk];
            const T* brow = vb.data() + kk * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return t.emplace(std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            // dA = G B^T
            auto& ga = tp.grad(a);
            const auto& vb2 = tp.val(b);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    T s = T(0);
                    const T* grow = g.data() + i * n;
                    const T* brow = vb2.data() + kk * n;
                    for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + kk] += s;
                }
        }
        if (tp.needs_grad(b)) {
            // dB = A^T G
            auto& gb = tp.grad(b);
            const auto& va2 = tp.val(a);
            for (int64_t i = 0; i < m; ++i) {
                const T* arow = va2.data() + i * k;
                const T* grow = g.data() + i * n;
                for (int64_t kk = 0; kk < k; ++kk) {
                    T av = arow[kk];
                    T* gbrow = gb.data() + kk * n;
                    for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

// A [m,n] + v (numel n) broadcast over rows.
template <typename T>
Var<T> add_rowvec(Tape<T>& t, Var<T> a, Var<T> v) {
    const auto& va = t.val(a);
    const auto& vv = t.val(v);
    if (va.rank() != 2 || vv.numel() != va.dim(1))
        throw ShapeError("add_rowvec: " + va.shape_str() + " + " + vv.shape_str());
    const int64_t m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] + vv[j];
    return t.emplace(std::move(out), {a, v}, [a, v, m, n](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            for (int64_t i = 0; i < m * n; ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(v)) {
            auto& gv = tp.grad(v);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
        }
    });
}

// A [m,n] * v (numel n) broadcast over rows.
template <typename T>
Var<T> mul_rowvec(Tape<T>& t, Var<T> a, Var<T> v) {
    const auto& va = t.val(a);
    const auto& vv = t.val(v);
    if (va.rank() != 2 || vv.numel() != va.dim(1))
        throw ShapeError("mul_rowvec: " + va.shape_str() + " * " + vv.shape_str());
    const int64_t m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] * vv[j];
    return t.emplace(std::move(out), {a, v}, [a, v, m, n](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        if (tp.needs_grad(a)) {
            auto& ga = tp.grad(a);
            const auto& vv2 = tp.val(v);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * vv2[j];
        }
        if (tp.needs_grad(v)) {
            auto& gv = tp.grad(v);
            const auto& va2 = tp.val(a);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gv[j] += g[i * n + j] * va2[i * n + j];
        }
    });
}

// Columns [c0, c0+n) of a rank-2 tensor.
template <typename T>
Var<T> slice_cols(Tape<T>& t, Var<T> a, int64_t c0, int64_t n) {
    const auto& va = t.val(a);
    if (va.rank() != 2 || c0 < 0 || c0 + n > va.dim(1))
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c0 + n) +
                         ") out of " + va.shape_str());
    const int64_t m = va.dim(0), cols = va.dim(1);
    Tensor<T> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = va[i * cols + c0 + j];
    return t.emplace(std::move(out), {a}, [a, c0, n, m, cols](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) ga[i * cols + c0 + j] += g[i * n + j];
    });
}

// Row `row` of a rank-2 table as a [1,n] tensor.
template <typename T>
Var<T> embed_row(Tape<T>& t, Var<T> table, int64_t row) {
    const auto& vt = t.val(table);
    if (vt.rank() != 2 || row < 0 || row >= vt.dim(0))
        throw ShapeError("embed_row: row " + std::to_string(row) + " out of " + vt.shape_str());
    const int64_t n = vt.dim(1);
    Tensor<T> out({1, n});
    for (int64_t j = 0; j < n; ++j) out[j] = vt[row * n + j];
    return t.emplace(std::move(out), {table}, [table, row, n](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& gt = tp.grad(table);
        for (int64_t j = 0; j < n; ++j) gt[row * n + j] += g[j];
    });
}

// Per-row layer norm without affine parameters; population variance.
template <typename T>
Var<T> layernorm_rows(Tape<T>& t, Var<T> a, T eps) {
    const auto& va = t.val(a);
    if (va.rank() != 2) throw ShapeError("layernorm_rows: need rank 2, got " + va.shape_str());
    const int64_t m = va.dim(0), n = va.dim(1);
    Tensor<T> out({m, n});
    Tensor<T> inv_sigma({m});
    for (int64_t i = 0; i < m; ++i) {
        const T* x = va.data() + i * n;
        T mu = T(0);
        for (int64_t j = 0; j < n; ++j) mu += x[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(n);
        T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = (x[j] - mu) * inv;
    }
    Tensor<T> y = out;
    return t.emplace(std::move(out), {a},
                     [a, m, n, inv_sigma, y](Tape<T>& tp, int32_t self) {
                         const auto& g = tp.grad(Var<T>{self});
                         auto& ga = tp.grad(a);
                         for (int64_t i = 0; i < m; ++i) {
                             const T* gr = g.data() + i * n;
                             const T* yr = y.data() + i * n;
                             T gmean = T(0), gymean = T(0);
                             for (int64_t j = 0; j < n; ++j) {
                                 gmean += gr[j];
                                 gymean += gr[j] * yr[j];
                             }
                             gmean /= static_cast<T>(n);
                             gymean /= static_cast<T>(n);
                             for (int64_t j = 0; j < n; ++j)
                                 ga[i * n + j] += inv_sigma[i] * (gr[j] - gmean - yr[j] * gymean);
                         }
                     });
}

// Multi-head self attention over q,k,v of shape [N, w]. scale multiplies the
// raw dot products. Softmax rows and probability-weighted value sums reduce
// over tokens, so both use order-independent sorted summation; everything
// else contracts over channels in fixed order.
template <typename T>
Var<T> attention(Tape<T>& t, Var<T> q, Var<T> k, Var<T> v, int heads, T scale_factor) {
    const auto& vq = t.val(q);
    const auto& vk = t.val(k);
    const auto& vv = t.val(v);
    detail::check_same_shape(vq, vk, "attention q/k");
    detail::check_same_shape(vq, vv, "attention q/v");
    if (vq.rank() != 2) throw ShapeError("attention: need rank 2 tokens, got " + vq.shape_str());
    const int64_t n = vq.dim(0), w = vq.dim(1);
    if (heads < 1 || w % heads != 0) throw ConfigError("attention: heads must divide width");
    const int64_t dh = w / heads;

    Tensor<T> probs({static_cast<int64_t>(heads), n, n});
    Tensor<T> out({n, w});
    std::vector<T> logits(static_cast<size_t>(n));
    std::vector<T> scratch;
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t h = 0; h < heads; ++h) {
        const int64_t c0 = h * dh;
        for (int64_t i = 0; i < n; ++i) {
            const T* qi = vq.data() + i * w + c0;
            for (int64_t j = 0; j < n; ++j) {
                const T* kj = vk.data() + j * w + c0;
                T dot = T(0);
                for (int64_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                logits[static_cast<size_t>(j)] = dot * scale_factor;
            }
            T* prow = probs.data() + (h * n + i) * n;
            detail::softmax_row_sorted(logits.data(), prow, n, scratch);
            // Weighted value sum in an order determined only by (p, value
            // row) so token order cannot influence rounding.
            std::iota(order.begin(), order.end(), int64_t(0));
            std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
                if (prow[x] != prow[y]) return prow[x] < prow[y];
                const T* vx = vv.data() + x * w + c0;
                const T* vy = vv.data() + y * w + c0;
                for (int64_t c = 0; c < dh; ++c)
                    if (vx[c] != vy[c]) return vx[c] < vy[c];
                return false;
            });
            T* orow = out.data() + i * w + c0;
            for (int64_t c = 0; c < dh; ++c) {
                T s = T(0);
                for (int64_t jj : order) s += prow[jj] * vv[jj * w + c0 + c];
                orow[c] = s;
            }
        }
    }

    return t.emplace(std::move(out), {q, k, v},
                     [q, k, v, heads, scale_factor, n, w, dh, probs](Tape<T>& tp, int32_t self) {
                         const auto& g = tp.grad(Var<T>{self});
                         const auto& vq2 = tp.val(q);
                         const auto& vk2 = tp.val(k);
                         const auto& vv2 = tp.val(v);
                         bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
                         Tensor<T> dlog({n, n});
                         for (int64_t h = 0; h < heads; ++h) {
                             const int64_t c0 = h * dh;
                             if (gv) {
                                 auto& gvv = tp.grad(v);
                                 for (int64_t j = 0; j < n; ++j)
                                     for (int64_t c = 0; c < dh; ++c) {
                                         T s = T(0);
                                         for (int64_t i = 0; i < n; ++i)
                                             s += probs[(h * n + i) * n + j] * g[i * w + c0 + c];
                                         gvv[j * w + c0 + c] += s;
                                     }
                             }
                             if (gq || gk) {
                                 for (int64_t i = 0; i < n; ++i) {
                                     const T* prow = probs.data() + (h * n + i) * n;
                                     const T* grow = g.data() + i * w + c0;
                                     T srow = T(0);
                                     for (int64_t j = 0; j < n; ++j) {
                                         T dp = T(0);
                                         const T* vj = vv2.data() + j * w + c0;
                                         for (int64_t c = 0; c < dh; ++c) dp += grow[c] * vj[c];
                                         dlog[i * n + j] = dp;
                                         srow += dp * prow[j];
                                     }
                                     for (int64_t j = 0; j < n; ++j)
                                         dlog[i * n + j] = prow[j] * (dlog[i * n + j] - srow);
                                 }
                                 if (gq) {
                                     auto& gqq = tp.grad(q);
                                     for (int64_t i = 0; i < n; ++i)
                                         for (int64_t c = 0; c < dh; ++c) {
                                             T s = T(0);
                                             for (int64_t j = 0; j < n; ++j)
                                                 s += dlog[i * n + j] * vk2[j * w + c0 + c];
                                             gqq[i * w + c0 + c] += s * scale_factor;
                                         }
                                 }
                                 if (gk) {
                                     auto& gkk = tp.grad(k);
                                     for (int64_t j = 0; j < n; ++j)
                                         for (int64_t c = 0; c < dh; ++c) {
                                             T s = T(0);
                                             for (int64_t i = 0; i < n; ++i)
                                                 s += dlog[i * n + j] * vq2[i * w + c0 + c];
                                             gkk[j * w + c0 + c] += s * scale_factor;
                                         }
                                 }
                             }
                         }
                     });
}

// ---- image <-> token layout ----

// [C,H,W] image to [N, p^2 C] tokens. Token n = gy*(W/p)+gx walks the patch
// grid row-major; feature f = c*p^2 + py*p + px.
template <typename T>
Var<T> patchify(Tape<T>& t, Var<T> img, int p) {
    const auto& vi = t.val(img);
    if (vi.rank() != 3) throw ShapeError("patchify: need [C,H,W], got " + vi.shape_str());
    const int64_t C = vi.dim(0), H = vi.dim(1), W = vi.dim(2);
    if (p < 1 || H % p != 0 || W % p != 0)
        throw ShapeError("patchify: patch " + std::to_string(p) + " must tile " + vi.shape_str());
    const int64_t gh = H / p, gw = W / p, n = gh * gw, pd = static_cast<int64_t>(p) * p * C;
    Tensor<T> out({n, pd});
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            T* tok = out.data() + (gy * gw + gx) * pd;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        tok[c * p * p + py * p + px] = vi.at(c, gy * p + py, gx * p + px);
        }
    return t.emplace(std::move(out), {img}, [img, p, C, H, W, gh, gw, pd](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& gi = tp.grad(img);
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                const T* tok = g.data() + (gy * gw + gx) * pd;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            gi.at(c, gy * p + py, gx * p + px) += tok[c * p * p + py * p + px];
            }
    });
}

// Inverse of patchify: [N, p^2 C] tokens back to a [C,H,W] image.
template <typename T>
Var<T> unpatchify(Tape<T>& t, Var<T> tokens, int p, int64_t C, int64_t H, int64_t W) {
    const auto& vt = t.val(tokens);
    const int64_t gh = H / p, gw = W / p, pd = static_cast<int64_t>(p) * p * C;
    if (vt.rank() != 2 || vt.dim(0) != gh * gw || vt.dim(1) != pd || H % p != 0 || W % p != 0)
        throw ShapeError("unpatchify: tokens " + vt.shape_str() + " do not tile [" + std::to_string(C) +
                         "," + std::to_string(H) + "," + std::to_string(W) + "] with p=" + std::to_string(p));
    Tensor<T> out({C, H, W});
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            const T* tok = vt.data() + (gy * gw + gx) * pd;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        out.at(c, gy * p + py, gx * p + px) = tok[c * p * p + py * p + px];
        }
    return t.emplace(std::move(out), {tokens}, [tokens, p, C, gh, gw, pd](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& gt = tp.grad(tokens);
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                T* tok = gt.data() + (gy * gw + gx) * pd;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            tok[c * p * p + py * p + px] += g.at(c, gy * p + py, gx * p + px);
            }
    });
}

// ---- image ops for metrics ----

// 2x2 average pooling; spatial dims must be even.
template <typename T>
Var<T> avgpool2(Tape<T>& t, Var<T> img) {
    const auto& vi = t.val(img);
    if (vi.rank() != 3 || vi.dim(1) % 2 != 0 || vi.dim(2) % 2 != 0)
        throw ShapeError("avgpool2: need [C,even,even], got " + vi.shape_str());
    const int64_t C = vi.dim(0), H = vi.dim(1), W = vi.dim(2);
    Tensor<T> out({C, H / 2, W / 2});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H / 2; ++y)
            for (int64_t x = 0; x < W / 2; ++x)
                out.at(c, y, x) = (vi.at(c, 2 * y, 2 * x) + vi.at(c, 2 * y, 2 * x + 1) +
                                   vi.at(c, 2 * y + 1, 2 * x) + vi.at(c, 2 * y + 1, 2 * x + 1)) /
                                  T(4);
    return t.emplace(std::move(out), {img}, [img, C, H, W](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& gi = tp.grad(img);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H / 2; ++y)
                for (int64_t x = 0; x < W / 2; ++x) {
                    T q = g.at(c, y, x) / T(4);
                    gi.at(c, 2 * y, 2 * x) += q;
                    gi.at(c, 2 * y, 2 * x + 1) += q;
                    gi.at(c, 2 * y + 1, 2 * x) += q;
                    gi.at(c, 2 * y + 1, 2 * x + 1) += q;
                }
    });
}

// Convolution with a fixed (non-learned) kernel [O,Cin,kh,kw], zero padding,
// given stride. Gradient flows to the input only; the kernel is baked data.
template <typename T>
Var<T> conv2d_fixed(Tape<T>& t, Var<T> img, Tensor<T> kernel, Tensor<T> bias, int stride, int pad) {
    const auto& vi = t.val(img);
    if (vi.rank() != 3 || kernel.rank() != 4)
        throw ShapeError("conv2d_fixed: image " + vi.shape_str() + ", kernel " + kernel.shape_str());
    const int64_t C = vi.dim(0), H = vi.dim(1), W = vi.dim(2);
    const int64_t O = kernel.dim(0), KC = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (KC != C) throw ShapeError("conv2d_fixed: kernel channels " + std::to_string(KC) +
                                  " vs image channels " + std::to_string(C));
    if (bias.numel() != O) throw ShapeError("conv2d_fixed: bias size mismatch");
    if (stride < 1) throw ConfigError("conv2d_fixed: stride must be >= 1");
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d_fixed: kernel larger than padded image");
    auto kidx = [C, kh, kw](int64_t o, int64_t c, int64_t ky, int64_t kx) {
        return ((o * C + c) * kh + ky) * kw + kx;
    };
    Tensor<T> out({O, Ho, Wo});
    for (int64_t o = 0; o < O; ++o)
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T s = bias[o];
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t y = oy * stride - pad + ky;
                        if (y < 0 || y >= H) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t x = ox * stride - pad + kx;
                            if (x < 0 || x >= W) continue;
                            s += kernel[kidx(o, c, ky, kx)] * vi.at(c, y, x);
                        }
                    }
                out.at(o, oy, ox) = s;
            }
    return t.emplace(std::move(out), {img},
                     [img, kernel, stride, pad, C, H, W, O, kh, kw, Ho, Wo, kidx](Tape<T>& tp, int32_t self) {
                         const auto& g = tp.grad(Var<T>{self});
                         auto& gi = tp.grad(img);
                         for (int64_t o = 0; o < O; ++o)
                             for (int64_t oy = 0; oy < Ho; ++oy)
                                 for (int64_t ox = 0; ox < Wo; ++ox) {
                                     T gv = g.at(o, oy, ox);
                                     for (int64_t c = 0; c < C; ++c)
                                         for (int64_t ky = 0; ky < kh; ++ky) {
                                             int64_t y = oy * stride - pad + ky;
                                             if (y < 0 || y >= H) continue;
                                             for (int64_t kx = 0; kx < kw; ++kx) {
                                                 int64_t x = ox * stride - pad + kx;
                                                 if (x < 0 || x >= W) continue;
                                                 gi.at(c, y, x) += kernel[kidx(o, c, ky, kx)] * gv;
                                             }
                                         }
                                 }
                     });
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Tape<T>& t, Var<T> a) {
    const auto& va = t.val(a);
    Tensor<T> out({1});
    T s = T(0);
    for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
    out[0] = s;
    return t.emplace(std::move(out), {a}, [a](Tape<T>& tp, int32_t self) {
        const auto& g = tp.grad(Var<T>{self});
        auto& ga = tp.grad(a);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
    });
}

template <typename T>
Var<T> mean_all(Tape<T>& t, Var<T> a) {
    const int64_t n = t.val(a).numel();
    return scale(t, sum_all(t, a), T(1) / static_cast<T>(n));
}

} // namespace ditforge
