#pragma once

// Encoder sub-modules: multi-head self-attention with relative positional
// scores, the gated convolution module, the position-wise feed-forward, the
// stride-4 convolutional subsampler, and the duration predictor.

#include <cmath>
#include <vector>

#include "cfmr/ops.hpp"
#include "cfmr/tensor.hpp"

namespace cfmr {

template <class Real>
struct LnParams {
    Tensor<Real> gamma, beta;
    double eps = 1e-12;
};

template <class Real>
Tensor<Real> apply_ln(Tensor<Real> x, const LnParams<Real>& p) {
    return layer_norm(x, p.gamma, p.beta, p.eps);
}

template <class Real>
Tensor<Real> linear(Tensor<Real> x, Tensor<Real> w, Tensor<Real> b) {
    auto y = matmul(x, w);
    return b.defined() ? add(y, b) : y;
}

// ---------------------------------------------------------------------------
// Position tables (plain value tensors, never differentiated)
// ---------------------------------------------------------------------------

// Sinusoidal embeddings for relative offsets T-1 ... -(T-1), one row per
// offset in descending order: row m encodes offset T-1-m. Even columns carry
// sin, odd columns carry cos of the same frequency.
template <class Real>
Tensor<Real> rel_pos_table(int64_t T, int64_t d) {
    if (T < 1) throw ContractError("rel_pos_table needs T >= 1");
    const int64_t rows = 2 * T - 1;
    Tensor<Real> out = Tensor<Real>::zeros({rows, d});
    auto& v = out.mutable_values();
    for (int64_t m = 0; m < rows; ++m) {
        const double offset = static_cast<double>(T - 1 - m);
        for (int64_t i = 0; i < d; ++i) {
            const int64_t pair = i - (i % 2);
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(pair) / static_cast<double>(d));
            const double arg = offset * freq;
            v[m * d + i] = static_cast<Real>(i % 2 == 0 ? std::sin(arg) : std::cos(arg));
        }
    }
    return out;
}

// Absolute sinusoidal positions 0..T-1 (decoder side).
template <class Real>
Tensor<Real> abs_pos_table(int64_t T, int64_t d) {
    Tensor<Real> out = Tensor<Real>::zeros({T, d});
    auto& v = out.mutable_values();
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t i = 0; i < d; ++i) {
            const int64_t pair = i - (i % 2);
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(pair) / static_cast<double>(d));
            const double arg = static_cast<double>(t) * freq;
            v[t * d + i] = static_cast<Real>(i % 2 == 0 ? std::sin(arg) : std::cos(arg));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> scale_op(Tensor<Real> x, double c) {
    return scale(x, static_cast<Real>(c));
}

// Single-head scaled dot-product attention on [B, T, dh] slices. mask (when
// defined) broadcasts onto the [B, T, T] score array; fully-masked rows
// produce all-zero outputs.
template <class Real>
Tensor<Real> scaled_dot_attention(Tensor<Real> q, Tensor<Real> k, Tensor<Real> v, Tensor<Real> mask,
                                  double scale) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
        throw DimensionError("scaled_dot_attention expects rank-3 inputs");
    }
    auto scores = scale_op(matmul(q, permute(k, {0, 2, 1})), scale);
    auto attn = mask.defined() ? masked_softmax(scores, mask, -1) : softmax(scores, -1);
    return matmul(attn, v);
}

template <class Real>
struct MhsaParams {
    Tensor<Real> wq, wk, wv, wo;  // [d_att, d_att], stored as H head slices of width d_att/H
    Tensor<Real> u, v;            // [H, 1, d_att/H] content/position biases
    Tensor<Real> wpos;            // [d_att, d_att]
    int64_t heads = 1;
};

// Multi-head self-attention. When `rel` (the [2T-1, d] offset table) is
// defined, scores get the Transformer-XL style relative term
//   score(i,j) = (q_i + u) . k_j + (q_i + v) . (Wpos r_{i-j})
// all scaled by 1/sqrt(d_att) as printed in the attention formula
// (1/sqrt(d_att/H) when scale_per_head is set). Heads are concatenated in
// index order and projected by wo.
template <class Real>
Tensor<Real> mhsa(Tensor<Real> x, const MhsaParams<Real>& p, Tensor<Real> rel, Tensor<Real> mask,
                  bool scale_per_head = false) {
    if (x.rank() != 3) throw DimensionError("mhsa expects [B, T, d], got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    if (p.wq.dim(0) != d) {
        throw DimensionError("mhsa width mismatch: input " + shape_str(x.shape()) + " vs wq " +
                             shape_str(p.wq.shape()));
    }
    const int64_t H = p.heads;
    if (d % H != 0) throw ConfigError("attention width must be divisible by head count");
    const int64_t dh = d / H;
    const double scale_v = 1.0 / std::sqrt(static_cast<double>(scale_per_head ? dh : d));

    auto heads_of = [&](Tensor<Real> y) {
        return permute(reshape(y, {B, T, H, dh}), {0, 2, 1, 3});  // [B, H, T, dh]
    };
    auto q = heads_of(matmul(x, p.wq));
    auto k = heads_of(matmul(x, p.wk));
    auto v = heads_of(matmul(x, p.wv));

    auto scores = matmul(add(q, p.u), permute(k, {0, 1, 3, 2}));  // [B, H, T, T]
    if (rel.defined()) {
        auto pos = permute(reshape(matmul(rel, p.wpos), {2 * T - 1, H, dh}), {1, 0, 2});  // [H, 2T-1, dh]
        auto pos_scores = matmul(add(q, p.v), permute(pos, {0, 2, 1}));                   // [B, H, T, 2T-1]
        scores = add(scores, rel_select(pos_scores));
    }
    scores = scale_op(scores, scale_v);

    auto attn = mask.defined() ? masked_softmax(scores, mask, -1) : softmax(scores, -1);
    auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, T, d});
    return matmul(ctx, p.wo);
}

// Cross-attention over a separate key/value sequence (decoder source
// attention); no relative term.
template <class Real>
Tensor<Real> cross_attention(Tensor<Real> x, Tensor<Real> memory, const MhsaParams<Real>& p,
                             Tensor<Real> mask, bool scale_per_head = false) {
    const int64_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    const int64_t S = memory.dim(1);
    const int64_t H = p.heads;
    const int64_t dh = d / H;
    const double scale_v = 1.0 / std::sqrt(static_cast<double>(scale_per_head ? dh : d));

    auto q = permute(reshape(matmul(x, p.wq), {B, T, H, dh}), {0, 2, 1, 3});
    auto k = permute(reshape(matmul(memory, p.wk), {B, S, H, dh}), {0, 2, 1, 3});
    auto v = permute(reshape(matmul(memory, p.wv), {B, S, H, dh}), {0, 2, 1, 3});
    auto scores = scale_op(matmul(q, permute(k, {0, 1, 3, 2})), scale_v);
    auto attn = mask.defined() ? masked_softmax(scores, mask, -1) : softmax(scores, -1);
    auto ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, T, d});
    return matmul(ctx, p.wo);
}

// ---------------------------------------------------------------------------
// Position-wise feed-forward
// ---------------------------------------------------------------------------

template <class Real>
struct FfnParams {
    Tensor<Real> w1, b1;  // [d_att, d_ff], [d_ff]
    Tensor<Real> w2, b2;  // [d_ff, d_att], [d_att]
    Act act = Act::swish;
};

template <class Real>
Tensor<Real> ffn(Tensor<Real> x, const FfnParams<Real>& p) {
    if (x.dim(-1) != p.w1.dim(0)) {
        throw DimensionError("ffn width mismatch: " + shape_str(x.shape()) + " vs " + shape_str(p.w1.shape()));
    }
    return linear(activation(linear(x, p.w1, p.b1), p.act), p.w2, p.b2);
}

// ---------------------------------------------------------------------------
// Convolution module: pointwise (C -> 2C) -> GLU -> depthwise(k) -> BN ->
// Swish -> pointwise (C -> C). Time length is preserved ("same" padding, odd
// kernels only). Padded frames are zeroed before each time-mixing step so
// outputs on valid frames do not depend on batch padding.
// ---------------------------------------------------------------------------

template <class Real>
struct BnState {
    Tensor<Real> gamma, beta;
    Tensor<Real> run_mean, run_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

template <class Real>
struct ConvModuleParams {
    Tensor<Real> pw1_w, pw1_b;  // [2C, C, 1], [2C]
    Tensor<Real> dw_w, dw_b;    // [C, 1, k], [C]
    BnState<Real> bn;
    Tensor<Real> pw2_w, pw2_b;  // [C, C, 1], [C]
    int64_t kernel = 15;
};

template <class Real>
Tensor<Real> conv_module(Tensor<Real> x, const ConvModuleParams<Real>& p, Tensor<Real> pad_mask,
                         bool train) {
    if (x.rank() != 3) throw DimensionError("conv_module expects [B, T, C]");
    if (p.kernel % 2 == 0) throw ConfigError("conv_module kernel must be odd");
    const int64_t C = x.dim(2);
    if (p.pw1_w.dim(1) != C) {
        throw DimensionError("conv_module channel mismatch: " + shape_str(x.shape()));
    }
    auto h = pad_mask.defined() ? mul(x, pad_mask) : x;
    h = conv1d(h, p.pw1_w, p.pw1_b, 1, 1, 0);
    h = glu(h);
    if (pad_mask.defined()) h = mul(h, pad_mask);  // pw1 bias leaks into pads otherwise
    h = conv1d(h, p.dw_w, p.dw_b, C, 1, (p.kernel - 1) / 2);
    h = batch_norm(h, p.bn.gamma, p.bn.beta, p.bn.run_mean, p.bn.run_var, p.bn.momentum, p.bn.eps, train);
    h = activation(h, Act::swish);
    h = conv1d(h, p.pw2_w, p.pw2_b, 1, 1, 0);
    if (pad_mask.defined()) h = mul(h, pad_mask);
    return h;
}

// ---------------------------------------------------------------------------
// Convolutional subsampler: two stride-2 kernel-3 unpadded 2-D convs over
// (time, feature), then a linear projection to d_att. Total time reduction
// factor 4 with length arithmetic l -> floor((l - 3) / 2) + 1 applied twice.
// ---------------------------------------------------------------------------

template <class Real>
struct SubsamplerParams {
    Tensor<Real> c1_w, c1_b;      // [ch, 1, 3, 3]
    Tensor<Real> c2_w, c2_b;      // [ch, ch, 3, 3]
    Tensor<Real> proj_w, proj_b;  // [ch * F'', d_att]
    int64_t channels = 256;
};

inline int64_t subsampled_extent(int64_t n) { return (n - 3) / 2 + 1; }

inline int64_t subsampled_length(int64_t l) {
    if (l < 7) {
        throw DimensionError("input too short for stride-4 subsampling: length " + std::to_string(l) +
                             " < 7");
    }
    return subsampled_extent(subsampled_extent(l));
}

template <class Real>
struct SubsampleResult {
    Tensor<Real> out;
    std::vector<int64_t> lengths;
};

template <class Real>
SubsampleResult<Real> subsample(Tensor<Real> x, const std::vector<int64_t>& lengths,
                                const SubsamplerParams<Real>& p) {
    if (x.rank() != 3) throw DimensionError("subsample expects [B, T, F]");
    const int64_t B = x.dim(0), T = x.dim(1), F = x.dim(2);
    if (T < 7) throw DimensionError("input too short for stride-4 subsampling: T = " + std::to_string(T));
    auto h = reshape(x, {B, T, F, 1});
    h = activation(conv2d(h, p.c1_w, p.c1_b, 2), Act::relu);
    h = activation(conv2d(h, p.c2_w, p.c2_b, 2), Act::relu);
    const int64_t To = h.dim(1), Fo = h.dim(2), ch = h.dim(3);
    auto flat = reshape(h, {B, To, Fo * ch});
    SubsampleResult<Real> r;
    r.out = linear(flat, p.proj_w, p.proj_b);
    r.lengths.reserve(lengths.size());
    for (int64_t l : lengths) r.lengths.push_back(subsampled_length(l));
    return r;
}

// ---------------------------------------------------------------------------
// Duration predictor: two (conv k3 "same" -> ReLU -> LN -> dropout) stages on
// the encoder output, then a linear head producing one log-duration per token.
// ---------------------------------------------------------------------------

template <class Real>
struct DurPredictorParams {
    Tensor<Real> c1_w, c1_b;  // [dh, d, 3]
    LnParams<Real> ln1;
    Tensor<Real> c2_w, c2_b;  // [dh, dh, 3]
    LnParams<Real> ln2;
    Tensor<Real> out_w, out_b;  // [dh, 1]
    double dropout_rate = 0.1;
};

template <class Real>
Tensor<Real> duration_predictor(Tensor<Real> x, const DurPredictorParams<Real>& p, bool train,
                                const Rng& rng) {
    auto h = activation(conv1d(x, p.c1_w, p.c1_b, 1, 1, 1), Act::relu);
    h = dropout(apply_ln(h, p.ln1), p.dropout_rate, train, rng.child(uint64_t(1)));
    h = activation(conv1d(h, p.c2_w, p.c2_b, 1, 1, 1), Act::relu);
    h = dropout(apply_ln(h, p.ln2), p.dropout_rate, train, rng.child(uint64_t(2)));
    auto y = linear(h, p.out_w, p.out_b);  // [B, L, 1]
    return reshape(y, {y.dim(0), y.dim(1)});
}

}  // namespace cfmr
