#pragma once

// Differentiable primitives over Tensor<Real>. Every op validates shapes,
// computes its forward value, and (when a tape is active and an input
// requires grad) records a backward closure. Gradient accumulation into a
// leaf is additive across uses; iteration orders are fixed so results are
// bit-reproducible run to run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "cfmr/common.hpp"
#include "cfmr/tensor.hpp"

namespace cfmr {

namespace detail {

// Offset into a (possibly broadcast) input for a linear index of `out_shape`.
inline int64_t offset_for(int64_t linear, const Shape& out_shape,
                          const std::vector<int64_t>& bstrides) {
    int64_t off = 0;
    for (int i = static_cast<int>(out_shape.size()) - 1; i >= 0; --i) {
        const int64_t extent = out_shape[static_cast<size_t>(i)];
        const int64_t c = linear % extent;
        linear /= extent;
        off += c * bstrides[static_cast<size_t>(i)];
    }
    return off;
}

template <class Real>
bool want_grad(Tensor<Real> a) {
    return Tape<Real>::current() != nullptr && a.defined() && a.requires_grad();
}

// Splits a shape at `axis` into (outer, len, inner) extents for row-wise ops.
struct AxisSplit {
    int64_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int64_t axis) {
    const int64_t r = static_cast<int64_t>(shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractError("axis out of range for " + shape_str(shape));
    AxisSplit s;
    for (int64_t i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
    s.len = shape[static_cast<size_t>(axis)];
    for (int64_t i = axis + 1; i < r; ++i) s.inner *= shape[static_cast<size_t>(i)];
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(Tensor<Real> a, Tensor<Real> b) {
    const Shape os = broadcast_shapes(a.shape(), b.shape());
    Tensor<Real> out = Tensor<Real>::zeros(os);
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const int64_t n = out.numel();
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    } else {
        for (int64_t i = 0; i < n; ++i) {
            ov[i] = av[detail::offset_for(i, os, sa)] + bv[detail::offset_for(i, os, sb)];
        }
    }
    if (detail::want_grad(a) || detail::want_grad(b)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, b, out, os, sa, sb]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const int64_t n = out.numel();
                if (a.requires_grad()) {
                    auto& ga = a.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) ga[detail::offset_for(i, os, sa)] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) gb[detail::offset_for(i, os, sb)] += g[i];
                }
            },
            {a, b, out});
    }
    check_finite(out.values(), "add");
    return out;
}

template <class Real>
Tensor<Real> sub(Tensor<Real> a, Tensor<Real> b) {
    const Shape os = broadcast_shapes(a.shape(), b.shape());
    Tensor<Real> out = Tensor<Real>::zeros(os);
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const int64_t n = out.numel();
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int64_t i = 0; i < n; ++i) {
        ov[i] = av[detail::offset_for(i, os, sa)] - bv[detail::offset_for(i, os, sb)];
    }
    if (detail::want_grad(a) || detail::want_grad(b)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, b, out, os, sa, sb]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const int64_t n = out.numel();
                if (a.requires_grad()) {
                    auto& ga = a.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) ga[detail::offset_for(i, os, sa)] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) gb[detail::offset_for(i, os, sb)] -= g[i];
                }
            },
            {a, b, out});
    }
    check_finite(out.values(), "sub");
    return out;
}

template <class Real>
Tensor<Real> mul(Tensor<Real> a, Tensor<Real> b) {
    const Shape os = broadcast_shapes(a.shape(), b.shape());
    Tensor<Real> out = Tensor<Real>::zeros(os);
    const auto sa = broadcast_strides(a.shape(), os);
    const auto sb = broadcast_strides(b.shape(), os);
    const int64_t n = out.numel();
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
    } else {
        for (int64_t i = 0; i < n; ++i) {
            ov[i] = av[detail::offset_for(i, os, sa)] * bv[detail::offset_for(i, os, sb)];
        }
    }
    if (detail::want_grad(a) || detail::want_grad(b)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, b, out, os, sa, sb]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& av = a.values();
                const auto& bv = b.values();
                const int64_t n = out.numel();
                if (a.requires_grad()) {
                    auto& ga = a.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) {
                        ga[detail::offset_for(i, os, sa)] += g[i] * bv[detail::offset_for(i, os, sb)];
                    }
                }
                if (b.requires_grad()) {
                    auto& gb = b.grad_buffer();
                    for (int64_t i = 0; i < n; ++i) {
                        gb[detail::offset_for(i, os, sb)] += g[i] * av[detail::offset_for(i, os, sa)];
                    }
                }
            },
            {a, b, out});
    }
    check_finite(out.values(), "mul");
    return out;
}

template <class Real>
Tensor<Real> scale(Tensor<Real> a, Real c) {
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    for (int64_t i = 0; i < n; ++i) ov[i] = c * av[i];
    if (detail::want_grad(a)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, out, c]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& ga = a.grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
            },
            {a, out});
    }
    check_finite(out.values(), "scale");
    return out;
}

template <class Real>
Tensor<Real> neg(Tensor<Real> a) {
    return scale(a, Real(-1));
}

template <class Real>
Tensor<Real> abs_op(Tensor<Real> a) {
    Tensor<Real> out = Tensor<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    for (int64_t i = 0; i < n; ++i) ov[i] = std::abs(av[i]);
    if (detail::want_grad(a)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& av = a.values();
                auto& ga = a.grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) {
                    // subgradient 0 at the kink
                    ga[i] += g[i] * (av[i] > Real(0) ? Real(1) : (av[i] < Real(0) ? Real(-1) : Real(0)));
                }
            },
            {a, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { relu, swish, sigmoid };

template <class Real>
Tensor<Real> activation(Tensor<Real> x, Act kind) {
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.mutable_values();
    const int64_t n = x.numel();
    auto sigm = [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); };
    switch (kind) {
        case Act::relu:
            for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] > Real(0) ? xv[i] : Real(0);
            break;
        case Act::sigmoid:
            for (int64_t i = 0; i < n; ++i) ov[i] = sigm(xv[i]);
            break;
        case Act::swish:
            for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * sigm(xv[i]);
            break;
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, kind, sigm]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.values();
                const auto& yv = out.values();
                auto& gx = x.grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) {
                    Real d;
                    switch (kind) {
                        case Act::relu: d = xv[i] > Real(0) ? Real(1) : Real(0); break;
                        case Act::sigmoid: d = yv[i] * (Real(1) - yv[i]); break;
                        case Act::swish: {
                            const Real s = sigm(xv[i]);
                            d = s * (Real(1) + xv[i] * (Real(1) - s));
                            break;
                        }
                        default: d = Real(0);
                    }
                    gx[i] += g[i] * d;
                }
            },
            {x, out});
    }
    check_finite(out.values(), "activation");
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted): train zeroes with prob p and scales survivors by
// 1/(1-p); eval is the identity. Masks are a pure function of (rng, index).
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> dropout(Tensor<Real> x, double p, bool train, const Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
    if (!train || p == 0.0) return x;
    const int64_t n = x.numel();
    std::vector<Real> factor(static_cast<size_t>(n));
    const Real keep_scale = Real(1.0 / (1.0 - p));
    for (int64_t i = 0; i < n; ++i) {
        factor[static_cast<size_t>(i)] =
            rng.uniform(static_cast<uint64_t>(i)) >= p ? keep_scale : Real(0);
    }
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * factor[static_cast<size_t>(i)];
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, factor = std::move(factor)]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
            },
            {x, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply: a[..., m, k] x b[..., k, n] -> [..., m, n], with the batch
// prefixes broadcast right-aligned (a rank-2 weight broadcasts over any batch).
// Gradients: dA = g Bt, dB = At g, accumulated over broadcast batches.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(Tensor<Real> a, Tensor<Real> b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const int64_t m = a.dim(-2), k = a.dim(-1);
    const int64_t k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2) {
        throw DimensionError("matmul inner extents disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = broadcast_shapes(abatch, bbatch);
    Shape os = batch;
    os.push_back(m);
    os.push_back(n);

    const auto sa = broadcast_strides(abatch, batch);
    const auto sb = broadcast_strides(bbatch, batch);
    const int64_t nbatch = numel_of(batch);
    const int64_t a_mat = m * k, b_mat = k * n, o_mat = m * n;

    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int64_t bi = 0; bi < nbatch; ++bi) {
        const int64_t ao = detail::offset_for(bi, batch, sa) * a_mat;
        const int64_t bo = detail::offset_for(bi, batch, sb) * b_mat;
        const int64_t oo = bi * o_mat;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                Real acc = 0;
                for (int64_t p = 0; p < k; ++p) acc += av[ao + i * k + p] * bv[bo + p * n + j];
                ov[oo + i * n + j] = acc;
            }
        }
    }
    if (detail::want_grad(a) || detail::want_grad(b)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [a, b, out, batch, sa, sb, m, n, k, a_mat, b_mat, o_mat]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& av = a.values();
                const auto& bv = b.values();
                const int64_t nbatch = numel_of(batch);
                for (int64_t bi = 0; bi < nbatch; ++bi) {
                    const int64_t ao = detail::offset_for(bi, batch, sa) * a_mat;
                    const int64_t bo = detail::offset_for(bi, batch, sb) * b_mat;
                    const int64_t oo = bi * o_mat;
                    if (a.requires_grad()) {
                        auto& ga = a.grad_buffer();
                        for (int64_t i = 0; i < m; ++i) {
                            for (int64_t p = 0; p < k; ++p) {
                                Real acc = 0;
                                for (int64_t j = 0; j < n; ++j) {
                                    acc += g[oo + i * n + j] * bv[bo + p * n + j];
                                }
                                ga[ao + i * k + p] += acc;
                            }
                        }
                    }
                    if (b.requires_grad()) {
                        auto& gb = b.grad_buffer();
                        for (int64_t p = 0; p < k; ++p) {
                            for (int64_t j = 0; j < n; ++j) {
                                Real acc = 0;
                                for (int64_t i = 0; i < m; ++i) {
                                    acc += av[ao + i * k + p] * g[oo + i * n + j];
                                }
                                gb[bo + p * n + j] += acc;
                            }
                        }
                    }
                }
            },
            {a, b, out});
    }
    check_finite(out.values(), "matmul");
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(Tensor<Real> x, Shape new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                             " changes element count");
    }
    Tensor<Real> out = Tensor<Real>::from(std::move(new_shape), x.values());
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            },
            {x, out});
    }
    return out;
}

template <class Real>
Tensor<Real> permute(Tensor<Real> x, const std::vector<int64_t>& perm) {
    const int64_t r = x.rank();
    if (static_cast<int64_t>(perm.size()) != r) throw ContractError("permute rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    Shape os(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
        const int64_t p = perm[static_cast<size_t>(i)];
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) throw ContractError("invalid permutation");
        seen[static_cast<size_t>(p)] = true;
        os[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(p)];
    }
    const auto in_strides = strides_of(x.shape());
    // stride of out-dim i in the input = stride of in-dim perm[i]
    std::vector<int64_t> map(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) map[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = xv[detail::offset_for(i, os, map)];
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, os, map]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                const int64_t n = out.numel();
                for (int64_t i = 0; i < n; ++i) gx[detail::offset_for(i, os, map)] += g[i];
            },
            {x, out});
    }
    return out;
}

template <class Real>
Tensor<Real> narrow(Tensor<Real> x, int64_t axis, int64_t start, int64_t len) {
    const int64_t r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractError("narrow axis out of range");
    const int64_t extent = x.shape()[static_cast<size_t>(axis)];
    if (start < 0 || len < 0 || start + len > extent) {
        throw DimensionError("narrow [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of bounds for " + shape_str(x.shape()));
    }
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    const auto split = detail::split_axis(x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t l = 0; l < len; ++l) {
            const int64_t src = (o * split.len + start + l) * split.inner;
            const int64_t dst = (o * len + l) * split.inner;
            for (int64_t i = 0; i < split.inner; ++i) ov[dst + i] = xv[src + i];
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, split, start, len]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (int64_t o = 0; o < split.outer; ++o) {
                    for (int64_t l = 0; l < len; ++l) {
                        const int64_t src = (o * len + l) * split.inner;
                        const int64_t dst = (o * split.len + start + l) * split.inner;
                        for (int64_t i = 0; i < split.inner; ++i) gx[dst + i] += g[src + i];
                    }
                }
            },
            {x, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(Tensor<Real> x) {
    Real acc = 0;
    for (const Real v : x.values()) acc += v;
    Tensor<Real> out = Tensor<Real>::scalar(acc);
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out]() mutable {
                if (!out.has_grad()) return;
                const Real g = out.grad()[0];
                auto& gx = x.grad_buffer();
                for (Real& v : gx) v += g;
            },
            {x, out});
    }
    check_finite(out.values(), "sum_all");
    return out;
}

template <class Real>
Tensor<Real> mean_all(Tensor<Real> x) {
    return scale(sum_all(x), Real(1) / static_cast<Real>(x.numel()));
}

template <class Real>
Tensor<Real> sum_axis(Tensor<Real> x, int64_t axis, bool keepdim = false) {
    const int64_t r = x.rank();
    if (axis < 0) axis += r;
    const auto split = detail::split_axis(x.shape(), axis);
    Shape os;
    for (int64_t i = 0; i < r; ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(x.shape()[static_cast<size_t>(i)]);
        }
    }
    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t l = 0; l < split.len; ++l) {
            const int64_t src = (o * split.len + l) * split.inner;
            const int64_t dst = o * split.inner;
            for (int64_t i = 0; i < split.inner; ++i) ov[dst + i] += xv[src + i];
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, split]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (int64_t o = 0; o < split.outer; ++o) {
                    for (int64_t l = 0; l < split.len; ++l) {
                        const int64_t dst = (o * split.len + l) * split.inner;
                        const int64_t src = o * split.inner;
                        for (int64_t i = 0; i < split.inner; ++i) gx[dst + i] += g[src + i];
                    }
                }
            },
            {x, out});
    }
    check_finite(out.values(), "sum_axis");
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family. masked_softmax gives excluded positions exactly zero
// weight; a row with no valid position yields all zeros rather than NaN.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> softmax(Tensor<Real> x, int64_t axis) {
    const auto split = detail::split_axis(x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t i = 0; i < split.inner; ++i) {
            const int64_t base = o * split.len * split.inner + i;
            Real m = xv[base];
            for (int64_t l = 1; l < split.len; ++l) m = std::max(m, xv[base + l * split.inner]);
            Real z = 0;
            for (int64_t l = 0; l < split.len; ++l) {
                const Real e = std::exp(xv[base + l * split.inner] - m);
                ov[base + l * split.inner] = e;
                z += e;
            }
            for (int64_t l = 0; l < split.len; ++l) ov[base + l * split.inner] /= z;
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, split]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& yv = out.values();
                auto& gx = x.grad_buffer();
                for (int64_t o = 0; o < split.outer; ++o) {
                    for (int64_t i = 0; i < split.inner; ++i) {
                        const int64_t base = o * split.len * split.inner + i;
                        Real dot = 0;
                        for (int64_t l = 0; l < split.len; ++l) {
                            const int64_t k = base + l * split.inner;
                            dot += g[k] * yv[k];
                        }
                        for (int64_t l = 0; l < split.len; ++l) {
                            const int64_t k = base + l * split.inner;
                            gx[k] += yv[k] * (g[k] - dot);
                        }
                    }
                }
            },
            {x, out});
    }
    check_finite(out.values(), "softmax");
    return out;
}

// mask broadcasts against x; entries > 0.5 are valid. Gradient does not flow
// into the mask.
template <class Real>
Tensor<Real> masked_softmax(Tensor<Real> x, Tensor<Real> mask, int64_t axis) {
    const Shape os = broadcast_shapes(x.shape(), mask.shape());
    if (os != x.shape()) {
        throw DimensionError("mask " + shape_str(mask.shape()) + " does not broadcast onto " +
                             shape_str(x.shape()));
    }
    const auto ms = broadcast_strides(mask.shape(), os);
    const auto split = detail::split_axis(x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    const auto& mv = mask.values();
    auto valid = [&](int64_t k) { return mv[detail::offset_for(k, os, ms)] > Real(0.5); };
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t i = 0; i < split.inner; ++i) {
            const int64_t base = o * split.len * split.inner + i;
            Real m = -std::numeric_limits<Real>::infinity();
            bool any = false;
            for (int64_t l = 0; l < split.len; ++l) {
                const int64_t k = base + l * split.inner;
                if (valid(k)) {
                    any = true;
                    m = std::max(m, xv[k]);
                }
            }
            if (!any) continue;  // fully-masked row -> all zeros
            Real z = 0;
            for (int64_t l = 0; l < split.len; ++l) {
                const int64_t k = base + l * split.inner;
                if (valid(k)) {
                    const Real e = std::exp(xv[k] - m);
                    ov[k] = e;
                    z += e;
                }
            }
            for (int64_t l = 0; l < split.len; ++l) {
                const int64_t k = base + l * split.inner;
                if (valid(k)) ov[k] /= z;
            }
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, split]() mutable {
                if (!out.has_grad()) return;
                // y is zero at masked positions, so the softmax backward form
                // already sends zero gradient there.
                const auto& g = out.grad();
                const auto& yv = out.values();
                auto& gx = x.grad_buffer();
                for (int64_t o = 0; o < split.outer; ++o) {
                    for (int64_t i = 0; i < split.inner; ++i) {
                        const int64_t base = o * split.len * split.inner + i;
                        Real dot = 0;
                        for (int64_t l = 0; l < split.len; ++l) {
                            const int64_t k = base + l * split.inner;
                            dot += g[k] * yv[k];
                        }
                        for (int64_t l = 0; l < split.len; ++l) {
                            const int64_t k = base + l * split.inner;
                            gx[k] += yv[k] * (g[k] - dot);
                        }
                    }
                }
            },
            {x, out});
    }
    check_finite(out.values(), "masked_softmax");
    return out;
}

template <class Real>
Tensor<Real> log_softmax(Tensor<Real> x, int64_t axis) {
    const auto split = detail::split_axis(x.shape(), axis);
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t i = 0; i < split.inner; ++i) {
            const int64_t base = o * split.len * split.inner + i;
            Real m = xv[base];
            for (int64_t l = 1; l < split.len; ++l) m = std::max(m, xv[base + l * split.inner]);
            Real z = 0;
            for (int64_t l = 0; l < split.len; ++l) z += std::exp(xv[base + l * split.inner] - m);
            const Real lse = m + std::log(z);
            for (int64_t l = 0; l < split.len; ++l) {
                ov[base + l * split.inner] = xv[base + l * split.inner] - lse;
            }
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, split]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& yv = out.values();
                auto& gx = x.grad_buffer();
                for (int64_t o = 0; o < split.outer; ++o) {
                    for (int64_t i = 0; i < split.inner; ++i) {
                        const int64_t base = o * split.len * split.inner + i;
                        Real gsum = 0;
                        for (int64_t l = 0; l < split.len; ++l) gsum += g[base + l * split.inner];
                        for (int64_t l = 0; l < split.len; ++l) {
                            const int64_t k = base + l * split.inner;
                            gx[k] += g[k] - std::exp(yv[k]) * gsum;
                        }
                    }
                }
            },
            {x, out});
    }
    check_finite(out.values(), "log_softmax");
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Layer norm over the last axis; gamma/beta have that axis's extent.
template <class Real>
Tensor<Real> layer_norm(Tensor<Real> x, Tensor<Real> gamma, Tensor<Real> beta,
                        double eps) {
    const int64_t d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm affine params must have extent " + std::to_string(d));
    }
    const int64_t rows = x.numel() / d;
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    std::vector<Real> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
    {
        auto& ov = out.mutable_values();
        const auto& xv = x.values();
        const auto& gv = gamma.values();
        const auto& bv = beta.values();
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t base = r * d;
            Real mu = 0;
            for (int64_t i = 0; i < d; ++i) mu += xv[base + i];
            mu /= static_cast<Real>(d);
            Real var = 0;
            for (int64_t i = 0; i < d; ++i) {
                const Real c = xv[base + i] - mu;
                var += c * c;
            }
            var /= static_cast<Real>(d);
            const Real r_ = Real(1) / std::sqrt(var + static_cast<Real>(eps));
            mean[static_cast<size_t>(r)] = mu;
            rstd[static_cast<size_t>(r)] = r_;
            for (int64_t i = 0; i < d; ++i) {
                ov[base + i] = gv[i] * (xv[base + i] - mu) * r_ + bv[i];
            }
        }
    }
    if (detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, gamma, beta, out, d, rows, mean = std::move(mean), rstd = std::move(rstd)]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.values();
                const auto& gv = gamma.values();
                for (int64_t r = 0; r < rows; ++r) {
                    const int64_t base = r * d;
                    const Real mu = mean[static_cast<size_t>(r)];
                    const Real rs = rstd[static_cast<size_t>(r)];
                    if (x.requires_grad()) {
                        // dx = r * (gg - mean(gg) - xhat * mean(gg * xhat)), gg = g * gamma
                        Real a = 0, b = 0;
                        for (int64_t i = 0; i < d; ++i) {
                            const Real xh = (xv[base + i] - mu) * rs;
                            const Real gg = g[base + i] * gv[i];
                            a += gg;
                            b += gg * xh;
                        }
                        a /= static_cast<Real>(d);
                        b /= static_cast<Real>(d);
                        auto& gx = x.grad_buffer();
                        for (int64_t i = 0; i < d; ++i) {
                            const Real xh = (xv[base + i] - mu) * rs;
                            gx[base + i] += rs * (g[base + i] * gv[i] - a - xh * b);
                        }
                    }
                    if (gamma.requires_grad()) {
                        auto& gg = gamma.grad_buffer();
                        for (int64_t i = 0; i < d; ++i) {
                            gg[i] += g[base + i] * (xv[base + i] - mu) * rs;
                        }
                    }
                    if (beta.requires_grad()) {
                        auto& gb = beta.grad_buffer();
                        for (int64_t i = 0; i < d; ++i) gb[i] += g[base + i];
                    }
                }
            },
            {x, gamma, beta, out});
    }
    check_finite(out.values(), "layer_norm");
    return out;
}

// Batch norm over (B, T) per channel for x[B, T, C]. Train mode normalizes
// with batch statistics (biased variance) and updates the running buffers in
// place: run = (1 - momentum) * run + momentum * stat, with the running
// variance blended from the unbiased batch variance. Eval mode normalizes
// with the running buffers, which start at mean 0 / var 1.
template <class Real>
Tensor<Real> batch_norm(Tensor<Real> x, Tensor<Real> gamma, Tensor<Real> beta,
                        Tensor<Real> run_mean, Tensor<Real> run_var, double momentum, double eps,
                        bool train) {
    if (x.rank() != 3) throw DimensionError("batch_norm expects [B, T, C], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
    if (gamma.numel() != C || beta.numel() != C || run_mean.numel() != C || run_var.numel() != C) {
        throw DimensionError("batch_norm state must have extent " + std::to_string(C));
    }
    const int64_t N = B * T;
    std::vector<Real> mu(static_cast<size_t>(C)), rstd(static_cast<size_t>(C));
    if (train) {
        if (N < 2) throw ContractError("batch_norm train mode needs B*T >= 2");
        const auto& xv = x.values();
        std::vector<Real> var(static_cast<size_t>(C), Real(0));
        for (int64_t c = 0; c < C; ++c) mu[static_cast<size_t>(c)] = 0;
        for (int64_t i = 0; i < N; ++i) {
            for (int64_t c = 0; c < C; ++c) mu[static_cast<size_t>(c)] += xv[i * C + c];
        }
        for (int64_t c = 0; c < C; ++c) mu[static_cast<size_t>(c)] /= static_cast<Real>(N);
        for (int64_t i = 0; i < N; ++i) {
            for (int64_t c = 0; c < C; ++c) {
                const Real d = xv[i * C + c] - mu[static_cast<size_t>(c)];
                var[static_cast<size_t>(c)] += d * d;
            }
        }
        auto& rm = run_mean.mutable_values();
        auto& rv = run_var.mutable_values();
        for (int64_t c = 0; c < C; ++c) {
            const Real vb = var[static_cast<size_t>(c)] / static_cast<Real>(N);
            const Real vu = var[static_cast<size_t>(c)] / static_cast<Real>(N - 1);
            rstd[static_cast<size_t>(c)] = Real(1) / std::sqrt(vb + static_cast<Real>(eps));
            rm[c] = static_cast<Real>(1.0 - momentum) * rm[c] + static_cast<Real>(momentum) * mu[static_cast<size_t>(c)];
            rv[c] = static_cast<Real>(1.0 - momentum) * rv[c] + static_cast<Real>(momentum) * vu;
        }
    } else {
        const auto& rm = run_mean.values();
        const auto& rv = run_var.values();
        for (int64_t c = 0; c < C; ++c) {
            mu[static_cast<size_t>(c)] = rm[c];
            rstd[static_cast<size_t>(c)] = Real(1) / std::sqrt(rv[c] + static_cast<Real>(eps));
        }
    }
    Tensor<Real> out = Tensor<Real>::zeros(x.shape());
    {
        auto& ov = out.mutable_values();
        const auto& xv = x.values();
        const auto& gv = gamma.values();
        const auto& bv = beta.values();
        for (int64_t i = 0; i < N; ++i) {
            for (int64_t c = 0; c < C; ++c) {
                ov[i * C + c] = gv[c] * (xv[i * C + c] - mu[static_cast<size_t>(c)]) * rstd[static_cast<size_t>(c)] + bv[c];
            }
        }
    }
    if (detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, gamma, beta, out, N, C, train, mu = std::move(mu), rstd = std::move(rstd)]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.values();
                const auto& gv = gamma.values();
                for (int64_t c = 0; c < C; ++c) {
                    const Real m = mu[static_cast<size_t>(c)];
                    const Real rs = rstd[static_cast<size_t>(c)];
                    Real a = 0, b = 0, dg = 0, db = 0;
                    for (int64_t i = 0; i < N; ++i) {
                        const Real xh = (xv[i * C + c] - m) * rs;
                        const Real go = g[i * C + c];
                        a += go * gv[c];
                        b += go * gv[c] * xh;
                        dg += go * xh;
                        db += go;
                    }
                    a /= static_cast<Real>(N);
                    b /= static_cast<Real>(N);
                    if (x.requires_grad()) {
                        auto& gx = x.grad_buffer();
                        for (int64_t i = 0; i < N; ++i) {
                            const Real xh = (xv[i * C + c] - m) * rs;
                            const Real go = g[i * C + c] * gv[c];
                            // eval mode: statistics are constants
                            gx[i * C + c] += train ? rs * (go - a - xh * b) : rs * go;
                        }
                    }
                    if (gamma.requires_grad()) gamma.grad_buffer()[c] += dg;
                    if (beta.requires_grad()) beta.grad_buffer()[c] += db;
                }
            },
            {x, gamma, beta, out});
    }
    check_finite(out.values(), "batch_norm");
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions. conv1d is a grouped cross-correlation along time for
// x[B, T, Cin] with w[Cout, Cin/groups, k]; symmetric zero padding. conv2d is
// an unpadded cross-correlation over (rows, cols) for x[B, H, W, Cin] with
// w[Cout, Cin, kh, kw]; both spatial dims share one stride.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> conv1d(Tensor<Real> x, Tensor<Real> w, Tensor<Real> bias,
                    int64_t groups, int64_t stride, int64_t padding) {
    if (x.rank() != 3) throw DimensionError("conv1d expects [B, T, C], got " + shape_str(x.shape()));
    if (w.rank() != 3) throw DimensionError("conv1d weight must be [Cout, Cin/groups, k], got " + shape_str(w.shape()));
    const int64_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const int64_t Cout = w.dim(0), Cpg = w.dim(1), K = w.dim(2);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0) {
        throw DimensionError("conv1d groups " + std::to_string(groups) + " must divide channels " +
                             std::to_string(Cin) + " and " + std::to_string(Cout));
    }
    if (Cpg != Cin / groups) {
        throw DimensionError("conv1d weight " + shape_str(w.shape()) + " inconsistent with Cin " +
                             std::to_string(Cin) + ", groups " + std::to_string(groups));
    }
    if (bias.defined() && bias.numel() != Cout) throw DimensionError("conv1d bias extent mismatch");
    if (T + 2 * padding < K) {
        throw DimensionError("conv1d kernel " + std::to_string(K) + " larger than padded input " +
                             std::to_string(T + 2 * padding));
    }
    const int64_t Tout = (T + 2 * padding - K) / stride + 1;
    const int64_t co_per_g = Cout / groups;

    Tensor<Real> out = Tensor<Real>::zeros({B, Tout, Cout});
    {
        auto& ov = out.mutable_values();
        const auto& xv = x.values();
        const auto& wv = w.values();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t to = 0; to < Tout; ++to) {
                for (int64_t co = 0; co < Cout; ++co) {
                    const int64_t g = co / co_per_g;
                    Real acc = bias.defined() ? bias.values()[co] : Real(0);
                    for (int64_t j = 0; j < K; ++j) {
                        const int64_t ti = to * stride + j - padding;
                        if (ti < 0 || ti >= T) continue;
                        const int64_t xoff = (b * T + ti) * Cin + g * Cpg;
                        const int64_t woff = (co * Cpg) * K + j;
                        for (int64_t ci = 0; ci < Cpg; ++ci) {
                            acc += xv[xoff + ci] * wv[woff + ci * K];
                        }
                    }
                    ov[(b * Tout + to) * Cout + co] = acc;
                }
            }
        }
    }
    if (detail::want_grad(x) || detail::want_grad(w) || detail::want_grad(bias)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, w, bias, out, B, T, Cin, Cout, Cpg, K, Tout, co_per_g, stride, padding]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.values();
                const auto& wv = w.values();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t to = 0; to < Tout; ++to) {
                        for (int64_t co = 0; co < Cout; ++co) {
                            const Real go = g[(b * Tout + to) * Cout + co];
                            if (go == Real(0)) continue;
                            const int64_t grp = co / co_per_g;
                            if (bias.defined() && bias.requires_grad()) bias.grad_buffer()[co] += go;
                            for (int64_t j = 0; j < K; ++j) {
                                const int64_t ti = to * stride + j - padding;
                                if (ti < 0 || ti >= T) continue;
                                const int64_t xoff = (b * T + ti) * Cin + grp * Cpg;
                                const int64_t woff = (co * Cpg) * K + j;
                                for (int64_t ci = 0; ci < Cpg; ++ci) {
                                    if (x.requires_grad()) x.grad_buffer()[xoff + ci] += go * wv[woff + ci * K];
                                    if (w.requires_grad()) w.grad_buffer()[woff + ci * K] += go * xv[xoff + ci];
                                }
                            }
                        }
                    }
                }
            },
            {x, w, bias, out});
    }
    check_finite(out.values(), "conv1d");
    return out;
}

template <class Real>
Tensor<Real> conv2d(Tensor<Real> x, Tensor<Real> w, Tensor<Real> bias,
                    int64_t stride) {
    if (x.rank() != 4) throw DimensionError("conv2d expects [B, H, W, C], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw DimensionError("conv2d weight must be [Cout, Cin, kh, kw]");
    const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
    const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Cin) {
        throw DimensionError("conv2d weight " + shape_str(w.shape()) + " vs input channels " +
                             std::to_string(Cin));
    }
    if (H < kh || W < kw) {
        throw DimensionError("conv2d kernel larger than input " + shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != Cout) throw DimensionError("conv2d bias extent mismatch");
    const int64_t Ho = (H - kh) / stride + 1;
    const int64_t Wo = (W - kw) / stride + 1;

    Tensor<Real> out = Tensor<Real>::zeros({B, Ho, Wo, Cout});
    {
        auto& ov = out.mutable_values();
        const auto& xv = x.values();
        const auto& wv = w.values();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t ho = 0; ho < Ho; ++ho) {
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    for (int64_t co = 0; co < Cout; ++co) {
                        Real acc = bias.defined() ? bias.values()[co] : Real(0);
                        for (int64_t ci = 0; ci < Cin; ++ci) {
                            for (int64_t r = 0; r < kh; ++r) {
                                const int64_t hi = ho * stride + r;
                                const int64_t xrow = ((b * H + hi) * W + wo * stride) * Cin + ci;
                                const int64_t wrow = ((co * Cin + ci) * kh + r) * kw;
                                for (int64_t c = 0; c < kw; ++c) {
                                    acc += xv[xrow + c * Cin] * wv[wrow + c];
                                }
                            }
                        }
                        ov[((b * Ho + ho) * Wo + wo) * Cout + co] = acc;
                    }
                }
            }
        }
    }
    if (detail::want_grad(x) || detail::want_grad(w) || detail::want_grad(bias)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, w, bias, out, B, H, W, Cin, Cout, kh, kw, Ho, Wo, stride]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                const auto& xv = x.values();
                const auto& wv = w.values();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            for (int64_t co = 0; co < Cout; ++co) {
                                const Real go = g[((b * Ho + ho) * Wo + wo) * Cout + co];
                                if (go == Real(0)) continue;
                                if (bias.defined() && bias.requires_grad()) bias.grad_buffer()[co] += go;
                                for (int64_t ci = 0; ci < Cin; ++ci) {
                                    for (int64_t r = 0; r < kh; ++r) {
                                        const int64_t hi = ho * stride + r;
                                        const int64_t xrow = ((b * H + hi) * W + wo * stride) * Cin + ci;
                                        const int64_t wrow = ((co * Cin + ci) * kh + r) * kw;
                                        for (int64_t c = 0; c < kw; ++c) {
                                            if (x.requires_grad()) x.grad_buffer()[xrow + c * Cin] += go * wv[wrow + c];
                                            if (w.requires_grad()) w.grad_buffer()[wrow + c] += go * xv[xrow + c * Cin];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            },
            {x, w, bias, out});
    }
    check_finite(out.values(), "conv2d");
    return out;
}

// ---------------------------------------------------------------------------
// Gated linear unit over the last axis: (a, b) = split halves, a * sigmoid(b).
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> glu(Tensor<Real> x) {
    const int64_t c2 = x.dim(-1);
    if (c2 % 2 != 0) {
        throw DimensionError("glu needs an even channel count, got " + shape_str(x.shape()));
    }
    const int64_t c = c2 / 2;
    Tensor<Real> a = narrow(x, -1, 0, c);
    Tensor<Real> b = narrow(x, -1, c, c);
    return mul(a, activation(b, Act::sigmoid));
}

// ---------------------------------------------------------------------------
// Gather / scatter primitives
// ---------------------------------------------------------------------------

// Row lookup: table[V, d] indexed by ids (flat, arranged as ids_shape).
// Output shape is ids_shape + [d]. Backward scatter-adds into table rows.
template <class Real>
Tensor<Real> embedding(Tensor<Real> table, const std::vector<int64_t>& ids, Shape ids_shape) {
    if (table.rank() != 2) throw DimensionError("embedding table must be [V, d]");
    const int64_t V = table.dim(0), d = table.dim(1);
    if (numel_of(ids_shape) != static_cast<int64_t>(ids.size())) {
        throw DimensionError("embedding ids shape mismatch");
    }
    for (const int64_t id : ids) {
        if (id < 0 || id >= V) {
            throw ContractError("token id " + std::to_string(id) + " out of range [0, " +
                                std::to_string(V) + ")");
        }
    }
    Shape os = ids_shape;
    os.push_back(d);
    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& tv = table.values();
    for (size_t i = 0; i < ids.size(); ++i) {
        const int64_t row = ids[i];
        for (int64_t j = 0; j < d; ++j) ov[static_cast<int64_t>(i) * d + j] = tv[row * d + j];
    }
    if (detail::want_grad(table)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [table, out, ids, d]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gt = table.grad_buffer();
                for (size_t i = 0; i < ids.size(); ++i) {
                    const int64_t row = ids[i];
                    for (int64_t j = 0; j < d; ++j) gt[row * d + j] += g[static_cast<int64_t>(i) * d + j];
                }
            },
            {table, out});
    }
    return out;
}

// Picks one entry along the last axis per leading position; idx.size() must
// equal numel(x) / last extent. Used for per-position target log-probs.
template <class Real>
Tensor<Real> select_last(Tensor<Real> x, const std::vector<int64_t>& idx) {
    const int64_t V = x.dim(-1);
    const int64_t rows = x.numel() / V;
    if (static_cast<int64_t>(idx.size()) != rows) throw DimensionError("select_last index count mismatch");
    Shape os(x.shape().begin(), x.shape().end() - 1);
    Tensor<Real> out = Tensor<Real>::zeros(os);
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t k = idx[static_cast<size_t>(r)];
        if (k < 0 || k >= V) throw ContractError("select_last index out of range");
        ov[r] = xv[r * V + k];
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, idx, V, rows]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (int64_t r = 0; r < rows; ++r) gx[r * V + idx[static_cast<size_t>(r)]] += g[r];
            },
            {x, out});
    }
    return out;
}

// Time gather for the length regulator: out[b, t, :] = x[b, idx[b][t], :],
// with idx -1 producing a zero row (padding).
template <class Real>
Tensor<Real> gather_time(Tensor<Real> x, const std::vector<std::vector<int64_t>>& idx) {
    if (x.rank() != 3) throw DimensionError("gather_time expects [B, L, d]");
    const int64_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
    if (static_cast<int64_t>(idx.size()) != B) throw DimensionError("gather_time batch mismatch");
    const int64_t T = idx.empty() ? 0 : static_cast<int64_t>(idx[0].size());
    for (const auto& row : idx) {
        if (static_cast<int64_t>(row.size()) != T) throw DimensionError("gather_time ragged index");
    }
    Tensor<Real> out = Tensor<Real>::zeros({B, T, d});
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < T; ++t) {
            const int64_t s = idx[static_cast<size_t>(b)][static_cast<size_t>(t)];
            if (s < 0) continue;
            if (s >= L) throw ContractError("gather_time index out of range");
            for (int64_t j = 0; j < d; ++j) {
                ov[(b * T + t) * d + j] = xv[(b * L + s) * d + j];
            }
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, idx, B, L, T, d]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t t = 0; t < T; ++t) {
                        const int64_t s = idx[static_cast<size_t>(b)][static_cast<size_t>(t)];
                        if (s < 0) continue;
                        for (int64_t j = 0; j < d; ++j) gx[(b * L + s) * d + j] += g[(b * T + t) * d + j];
                    }
                }
            },
            {x, out});
    }
    return out;
}

// Relative-offset selection: scores[b, h, i, m] over offsets m = 0..2T-2
// (offset value T-1-m) become scores[b, h, i, j] with m = T-1-i+j.
template <class Real>
Tensor<Real> rel_select(Tensor<Real> x) {
    if (x.rank() != 4) throw DimensionError("rel_select expects [B, H, T, 2T-1]");
    const int64_t B = x.dim(0), H = x.dim(1), T = x.dim(2), M = x.dim(3);
    if (M != 2 * T - 1) {
        throw DimensionError("rel_select last extent must be 2T-1, got " + shape_str(x.shape()));
    }
    Tensor<Real> out = Tensor<Real>::zeros({B, H, T, T});
    auto& ov = out.mutable_values();
    const auto& xv = x.values();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t i = 0; i < T; ++i) {
                const int64_t src = ((b * H + h) * T + i) * M;
                const int64_t dst = ((b * H + h) * T + i) * T;
                for (int64_t j = 0; j < T; ++j) ov[dst + j] = xv[src + (T - 1 - i + j)];
            }
        }
    }
    if (detail::want_grad(x)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [x, out, B, H, T, M]() mutable {
                if (!out.has_grad()) return;
                const auto& g = out.grad();
                auto& gx = x.grad_buffer();
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t h = 0; h < H; ++h) {
                        for (int64_t i = 0; i < T; ++i) {
                            const int64_t dst = ((b * H + h) * T + i) * M;
                            const int64_t src = ((b * H + h) * T + i) * T;
                            for (int64_t j = 0; j < T; ++j) gx[dst + (T - 1 - i + j)] += g[src + j];
                        }
                    }
                }
            },
            {x, out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mask builders (plain value tensors, 1 = valid, never differentiated)
// ---------------------------------------------------------------------------

// [B, 1, 1, T] key-validity mask from per-sequence lengths.
template <class Real>
Tensor<Real> key_padding_mask(const std::vector<int64_t>& lengths, int64_t T) {
    const int64_t B = static_cast<int64_t>(lengths.size());
    Tensor<Real> m = Tensor<Real>::zeros({B, 1, 1, T});
    auto& mv = m.mutable_values();
    for (int64_t b = 0; b < B; ++b) {
        const int64_t l = std::min<int64_t>(lengths[static_cast<size_t>(b)], T);
        for (int64_t t = 0; t < l; ++t) mv[b * T + t] = Real(1);
    }
    return m;
}

// [T, T] causal mask, position i may attend to j <= i.
template <class Real>
Tensor<Real> causal_mask(int64_t T) {
    Tensor<Real> m = Tensor<Real>::zeros({T, T});
    auto& mv = m.mutable_values();
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t j = 0; j <= i; ++j) mv[i * T + j] = Real(1);
    }
    return m;
}

// [B, T, 1] frame-validity mask for zeroing padded frames.
template <class Real>
Tensor<Real> frame_mask(const std::vector<int64_t>& lengths, int64_t T) {
    const int64_t B = static_cast<int64_t>(lengths.size());
    Tensor<Real> m = Tensor<Real>::zeros({B, T, 1});
    auto& mv = m.mutable_values();
    for (int64_t b = 0; b < B; ++b) {
        const int64_t l = std::min<int64_t>(lengths[static_cast<size_t>(b)], T);
        for (int64_t t = 0; t < l; ++t) mv[b * T + t] = Real(1);
    }
    return m;
}

}  // namespace cfmr
