#pragma once

// Model assembly: the parameter store, deterministic initialization, the
// Conformer block, the encoder stack, the Transformer decoder, and the task
// heads (joint CTC-attention recognition, mask-based separation, duration
// predictor synthesis).
//
// Parameter names are a stable public contract (checkpoints address tensors
// by name), e.g. "enc.block3.conv.dw.weight".

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfmr/model_config.hpp"
#include "cfmr/nn.hpp"
#include "cfmr/ops.hpp"
#include "cfmr/tensor.hpp"

namespace cfmr {

// ---------------------------------------------------------------------------
// ParamStore: named, ordered collection of tensors. Iteration order is
// insertion order and is identical across runs. Trainable tensors carry
// requires_grad; batch-norm running statistics live here too (they are
// checkpointed and averaged) but are not trainable.
// ---------------------------------------------------------------------------

template <class Real>
class ParamStore {
public:
    Tensor<Real> add(const std::string& name, Tensor<Real> t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(t);
        return t;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor<Real>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return tensors_[it->second];
    }

    Tensor<Real>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return tensors_[it->second];
    }

    size_t size() const { return tensors_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const Tensor<Real>& tensor(size_t i) const { return tensors_[i]; }
    Tensor<Real>& tensor(size_t i) { return tensors_[i]; }

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, size_t> index_;
    std::vector<Tensor<Real>> tensors_;
};

// Element count over trainable tensors only.
template <class Real>
int64_t count_params(const ParamStore<Real>& store) {
    int64_t n = 0;
    for (size_t i = 0; i < store.size(); ++i) {
        if (store.tensor(i).requires_grad()) n += store.tensor(i).numel();
    }
    return n;
}

// ---------------------------------------------------------------------------
// Deterministic initialization: weights uniform(-s, s) with s = 1/sqrt(fan_in)
// drawn from a per-name RNG stream, biases zero, LN/BN gamma 1 beta 0,
// relative-position biases u/v zero. Same seed, same bits.
// ---------------------------------------------------------------------------

template <class Real>
struct InitCtx {
    ParamStore<Real>* store;
    Rng rng;

    Tensor<Real> weight(const std::string& name, Shape shape, int64_t fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        auto t = Tensor<Real>::uniform(std::move(shape), rng.child(name), static_cast<Real>(-s),
                                       static_cast<Real>(s), true);
        return store->add(name, t);
    }

    Tensor<Real> constant(const std::string& name, Shape shape, Real value, bool trainable) {
        auto t = Tensor<Real>::full(std::move(shape), value, trainable);
        return store->add(name, t);
    }
};

// ---------------------------------------------------------------------------
// Parameter groups
// ---------------------------------------------------------------------------

template <class Real>
struct ConformerBlockParams {
    LnParams<Real> ln_ffn1, ln_mhsa, ln_conv, ln_ffn2, ln_final;
    FfnParams<Real> ffn1, ffn2;
    MhsaParams<Real> mhsa;
    ConvModuleParams<Real> conv;
    double dropout_rate = 0.1;
    bool use_conv = true;
    bool use_rel_pos = true;
    bool scale_per_head = false;
};

template <class Real>
struct DecoderBlockParams {
    LnParams<Real> ln_self, ln_src, ln_ffn;
    MhsaParams<Real> self_attn, src_attn;
    FfnParams<Real> ffn;
    double dropout_rate = 0.1;
    bool scale_per_head = false;
};

namespace detail {

template <class Real>
LnParams<Real> build_ln(InitCtx<Real>& ctx, const std::string& prefix, int64_t d, double eps) {
    LnParams<Real> p;
    p.gamma = ctx.constant(prefix + ".gamma", {d}, Real(1), true);
    p.beta = ctx.constant(prefix + ".beta", {d}, Real(0), true);
    p.eps = eps;
    return p;
}

template <class Real>
FfnParams<Real> build_ffn(InitCtx<Real>& ctx, const std::string& prefix, int64_t d, int64_t dff, Act act) {
    FfnParams<Real> p;
    p.w1 = ctx.weight(prefix + ".w1", {d, dff}, d);
    p.b1 = ctx.constant(prefix + ".b1", {dff}, Real(0), true);
    p.w2 = ctx.weight(prefix + ".w2", {dff, d}, dff);
    p.b2 = ctx.constant(prefix + ".b2", {d}, Real(0), true);
    p.act = act;
    return p;
}

template <class Real>
MhsaParams<Real> build_mhsa(InitCtx<Real>& ctx, const std::string& prefix, int64_t d, int64_t heads,
                            bool with_pos) {
    MhsaParams<Real> p;
    p.wq = ctx.weight(prefix + ".wq", {d, d}, d);
    p.wk = ctx.weight(prefix + ".wk", {d, d}, d);
    p.wv = ctx.weight(prefix + ".wv", {d, d}, d);
    p.wo = ctx.weight(prefix + ".wo", {d, d}, d);
    p.heads = heads;
    const int64_t dh = d / heads;
    p.u = ctx.constant(prefix + ".u", {heads, 1, dh}, Real(0), true);
    if (with_pos) {
        p.v = ctx.constant(prefix + ".v", {heads, 1, dh}, Real(0), true);
        p.wpos = ctx.weight(prefix + ".wpos", {d, d}, d);
    } else {
        // cross/self attention without the relative term still uses (q + u);
        // u stays a trainable zero-initialized bias
        p.v = Tensor<Real>();
        p.wpos = Tensor<Real>();
    }
    return p;
}

template <class Real>
ConvModuleParams<Real> build_conv_module(InitCtx<Real>& ctx, const std::string& prefix, int64_t C,
                                         int64_t kernel, double bn_momentum, double bn_eps) {
    ConvModuleParams<Real> p;
    p.pw1_w = ctx.weight(prefix + ".pw1.weight", {2 * C, C, 1}, C);
    p.pw1_b = ctx.constant(prefix + ".pw1.bias", {2 * C}, Real(0), true);
    p.dw_w = ctx.weight(prefix + ".dw.weight", {C, 1, kernel}, kernel);
    p.dw_b = ctx.constant(prefix + ".dw.bias", {C}, Real(0), true);
    p.bn.gamma = ctx.constant(prefix + ".bn.gamma", {C}, Real(1), true);
    p.bn.beta = ctx.constant(prefix + ".bn.beta", {C}, Real(0), true);
    p.bn.run_mean = ctx.constant(prefix + ".bn.running_mean", {C}, Real(0), false);
    p.bn.run_var = ctx.constant(prefix + ".bn.running_var", {C}, Real(1), false);
    p.bn.momentum = bn_momentum;
    p.bn.eps = bn_eps;
    p.pw2_w = ctx.weight(prefix + ".pw2.weight", {C, C, 1}, C);
    p.pw2_b = ctx.constant(prefix + ".pw2.bias", {C}, Real(0), true);
    p.kernel = kernel;
    return p;
}

template <class Real>
ConformerBlockParams<Real> build_conformer_block(InitCtx<Real>& ctx, const std::string& prefix,
                                                 const ModelConfig& cfg) {
    ConformerBlockParams<Real> p;
    p.ln_ffn1 = build_ln(ctx, prefix + ".ln_ffn1", cfg.d_att, cfg.ln_eps);
    p.ffn1 = build_ffn(ctx, prefix + ".ffn1", cfg.d_att, cfg.d_ff, Act::swish);
    p.ln_mhsa = build_ln(ctx, prefix + ".ln_mhsa", cfg.d_att, cfg.ln_eps);
    p.mhsa = build_mhsa(ctx, prefix + ".mhsa", cfg.d_att, cfg.heads, cfg.use_rel_pos);
    if (cfg.use_conv_module) {
        p.ln_conv = build_ln(ctx, prefix + ".ln_conv", cfg.d_att, cfg.ln_eps);
        p.conv = build_conv_module(ctx, prefix + ".conv", cfg.d_att, cfg.kernel, cfg.bn_momentum, cfg.bn_eps);
    }
    p.ln_ffn2 = build_ln(ctx, prefix + ".ln_ffn2", cfg.d_att, cfg.ln_eps);
    p.ffn2 = build_ffn(ctx, prefix + ".ffn2", cfg.d_att, cfg.d_ff, Act::swish);
    p.ln_final = build_ln(ctx, prefix + ".ln_final", cfg.d_att, cfg.ln_eps);
    p.dropout_rate = cfg.dropout;
    p.use_conv = cfg.use_conv_module;
    p.use_rel_pos = cfg.use_rel_pos;
    p.scale_per_head = cfg.scale_per_head;
    return p;
}

template <class Real>
DecoderBlockParams<Real> build_decoder_block(InitCtx<Real>& ctx, const std::string& prefix,
                                             const ModelConfig& cfg) {
    DecoderBlockParams<Real> p;
    p.ln_self = build_ln(ctx, prefix + ".ln_self", cfg.d_att, cfg.ln_eps);
    p.self_attn = build_mhsa(ctx, prefix + ".self", cfg.d_att, cfg.heads, false);
    p.ln_src = build_ln(ctx, prefix + ".ln_src", cfg.d_att, cfg.ln_eps);
    p.src_attn = build_mhsa(ctx, prefix + ".src", cfg.d_att, cfg.heads, false);
    p.ln_ffn = build_ln(ctx, prefix + ".ln_ffn", cfg.d_att, cfg.ln_eps);
    p.ffn = build_ffn(ctx, prefix + ".ffn", cfg.d_att, cfg.dec_ff(), Act::relu);
    p.dropout_rate = cfg.dropout;
    p.scale_per_head = cfg.scale_per_head;
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class Real>
struct Model {
    ModelConfig cfg;
    ParamStore<Real> store;

    SubsamplerParams<Real> subsampler;  // asr/st frontend
    Tensor<Real> ss_in_w, ss_in_b;      // ss frontend (frame-rate preserving)
    Tensor<Real> tts_embed;             // tts frontend

    std::vector<ConformerBlockParams<Real>> enc;

    Tensor<Real> ctc_w, ctc_b;  // d_att -> vocab+1, blank id 0

    Tensor<Real> dec_embed;  // [vocab+2, d], bos = vocab, eos = vocab+1
    std::vector<DecoderBlockParams<Real>> dec;
    LnParams<Real> dec_ln_final;
    Tensor<Real> dec_out_w, dec_out_b;

    Tensor<Real> mask_w, mask_b;  // ss head: d_att -> speakers * feat_dim

    std::vector<ConformerBlockParams<Real>> tts_dec;
    LnParams<Real> tts_dec_ln;   // unused (blocks own their final LN); kept for clarity
    Tensor<Real> tts_out_w, tts_out_b;
    DurPredictorParams<Real> dur;

    int64_t bos_id() const { return cfg.vocab; }
    int64_t eos_id() const { return cfg.vocab + 1; }
    int64_t dec_vocab() const { return cfg.vocab + 2; }
    int64_t ctc_classes() const { return cfg.vocab + 1; }
};

template <class Real>
Model<Real> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<Real> m;
    m.cfg = cfg;
    InitCtx<Real> ctx{&m.store, Rng(seed)};

    switch (cfg.task) {
        case Task::asr:
        case Task::st: {
            const int64_t ch = cfg.subsample_channels;
            m.subsampler.channels = ch;
            m.subsampler.c1_w = ctx.weight("subsample.conv1.weight", {ch, 1, 3, 3}, 9);
            m.subsampler.c1_b = ctx.constant("subsample.conv1.bias", {ch}, Real(0), true);
            m.subsampler.c2_w = ctx.weight("subsample.conv2.weight", {ch, ch, 3, 3}, 9 * ch);
            m.subsampler.c2_b = ctx.constant("subsample.conv2.bias", {ch}, Real(0), true);
            const int64_t fo = subsampled_extent(subsampled_extent(cfg.feat_dim));
            m.subsampler.proj_w = ctx.weight("subsample.proj.weight", {ch * fo, cfg.d_att}, ch * fo);
            m.subsampler.proj_b = ctx.constant("subsample.proj.bias", {cfg.d_att}, Real(0), true);
            break;
        }
        case Task::ss:
            m.ss_in_w = ctx.weight("ss.in.weight", {cfg.feat_dim, cfg.d_att}, cfg.feat_dim);
            m.ss_in_b = ctx.constant("ss.in.bias", {cfg.d_att}, Real(0), true);
            break;
        case Task::tts:
            m.tts_embed = ctx.weight("tts.embed", {cfg.vocab, cfg.d_att}, cfg.d_att);
            break;
    }

    for (int64_t i = 0; i < cfg.enc_blocks; ++i) {
        m.enc.push_back(detail::build_conformer_block(ctx, "enc.block" + std::to_string(i), cfg));
    }

    switch (cfg.task) {
        case Task::asr:
        case Task::st: {
            m.ctc_w = ctx.weight("ctc.weight", {cfg.d_att, cfg.vocab + 1}, cfg.d_att);
            m.ctc_b = ctx.constant("ctc.bias", {cfg.vocab + 1}, Real(0), true);
            m.dec_embed = ctx.weight("dec.embed", {cfg.vocab + 2, cfg.d_att}, cfg.d_att);
            for (int64_t i = 0; i < cfg.dec_blocks; ++i) {
                m.dec.push_back(detail::build_decoder_block(ctx, "dec.block" + std::to_string(i), cfg));
            }
            m.dec_ln_final = detail::build_ln(ctx, "dec.ln_final", cfg.d_att, cfg.ln_eps);
            m.dec_out_w = ctx.weight("dec.out.weight", {cfg.d_att, cfg.vocab + 2}, cfg.d_att);
            m.dec_out_b = ctx.constant("dec.out.bias", {cfg.vocab + 2}, Real(0), true);
            break;
        }
        case Task::ss:
            m.mask_w = ctx.weight("ss.mask.weight", {cfg.d_att, cfg.ss_speakers * cfg.feat_dim}, cfg.d_att);
            m.mask_b = ctx.constant("ss.mask.bias", {cfg.ss_speakers * cfg.feat_dim}, Real(0), true);
            break;
        case Task::tts: {
            for (int64_t i = 0; i < cfg.dec_blocks; ++i) {
                m.tts_dec.push_back(detail::build_conformer_block(ctx, "tts.dec.block" + std::to_string(i), cfg));
            }
            m.tts_out_w = ctx.weight("tts.out.weight", {cfg.d_att, cfg.tts_feat_dim}, cfg.d_att);
            m.tts_out_b = ctx.constant("tts.out.bias", {cfg.tts_feat_dim}, Real(0), true);
            m.dur.c1_w = ctx.weight("tts.dur.conv1.weight", {cfg.dur_hidden, cfg.d_att, 3}, 3 * cfg.d_att);
            m.dur.c1_b = ctx.constant("tts.dur.conv1.bias", {cfg.dur_hidden}, Real(0), true);
            m.dur.ln1 = detail::build_ln(ctx, "tts.dur.ln1", cfg.dur_hidden, cfg.ln_eps);
            m.dur.c2_w = ctx.weight("tts.dur.conv2.weight", {cfg.dur_hidden, cfg.dur_hidden, 3}, 3 * cfg.dur_hidden);
            m.dur.c2_b = ctx.constant("tts.dur.conv2.bias", {cfg.dur_hidden}, Real(0), true);
            m.dur.ln2 = detail::build_ln(ctx, "tts.dur.ln2", cfg.dur_hidden, cfg.ln_eps);
            m.dur.out_w = ctx.weight("tts.dur.out.weight", {cfg.dur_hidden, 1}, cfg.dur_hidden);
            m.dur.out_b = ctx.constant("tts.dur.out.bias", {1}, Real(0), true);
            m.dur.dropout_rate = cfg.dropout;
            break;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Conformer block, Fig-style wiring:
//   x1 = x  + 1/2 Drop(FFN1(LN(x)))
//   x2 = x1 +     Drop(MHSA(LN(x1)))
//   x3 = x2 +     Drop(CONV(LN(x2)))
//   x4 = x3 + 1/2 Drop(FFN2(LN(x3)))
//   out = LN_final(x4)
// ---------------------------------------------------------------------------

template <class Real>
struct BlockTrace {
    Tensor<Real> ffn1_out, ffn1_inc;
    Tensor<Real> mhsa_out, mhsa_inc;
    Tensor<Real> conv_out, conv_inc;
    Tensor<Real> ffn2_out, ffn2_inc;
};

template <class Real>
Tensor<Real> conformer_block(Tensor<Real> x, const ConformerBlockParams<Real>& p, Tensor<Real> rel,
                             Tensor<Real> attn_mask, Tensor<Real> pad_mask, bool train, const Rng& rng,
                             BlockTrace<Real>* trace = nullptr) {
    auto f1 = ffn(apply_ln(x, p.ln_ffn1), p.ffn1);
    auto i1 = scale_op(dropout(f1, p.dropout_rate, train, rng.child(uint64_t(1))), 0.5);
    auto x1 = add(x, i1);

    auto a = mhsa(apply_ln(x1, p.ln_mhsa), p.mhsa, p.use_rel_pos ? rel : Tensor<Real>(), attn_mask,
                  p.scale_per_head);
    auto ia = dropout(a, p.dropout_rate, train, rng.child(uint64_t(2)));
    auto x2 = add(x1, ia);

    Tensor<Real> x3 = x2, c, ic;
    if (p.use_conv) {
        c = conv_module(apply_ln(x2, p.ln_conv), p.conv, pad_mask, train);
        ic = dropout(c, p.dropout_rate, train, rng.child(uint64_t(3)));
        x3 = add(x2, ic);
    }

    auto f2 = ffn(apply_ln(x3, p.ln_ffn2), p.ffn2);
    auto i2 = scale_op(dropout(f2, p.dropout_rate, train, rng.child(uint64_t(4))), 0.5);
    auto x4 = add(x3, i2);

    if (trace) {
        trace->ffn1_out = f1;
        trace->ffn1_inc = i1;
        trace->mhsa_out = a;
        trace->mhsa_inc = ia;
        trace->conv_out = c;
        trace->conv_inc = ic;
        trace->ffn2_out = f2;
        trace->ffn2_inc = i2;
    }
    return apply_ln(x4, p.ln_final);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <class Real>
struct EncodeResult {
    Tensor<Real> h;
    std::vector<int64_t> lengths;
};

// Runs the block stack on an already-projected [B, T, d_att] sequence.
template <class Real>
EncodeResult<Real> run_encoder_blocks(const Model<Real>& m, Tensor<Real> h,
                                      const std::vector<int64_t>& lengths, bool train, const Rng& rng) {
    const int64_t T = h.dim(1);
    auto attn_mask = key_padding_mask<Real>(lengths, T);
    auto pad_mask = frame_mask<Real>(lengths, T);
    Tensor<Real> rel;
    if (m.cfg.use_rel_pos) {
        rel = rel_pos_table<Real>(T, m.cfg.d_att);
    } else {
        h = add(h, abs_pos_table<Real>(T, m.cfg.d_att));
    }
    for (size_t i = 0; i < m.enc.size(); ++i) {
        h = conformer_block(h, m.enc[i], rel, attn_mask, pad_mask, train, rng.child(0x100 + i));
    }
    return {h, lengths};
}

// asr/st encoder: stride-4 subsampling then the block stack.
template <class Real>
EncodeResult<Real> encode(const Model<Real>& m, Tensor<Real> feats, const std::vector<int64_t>& lengths,
                          bool train, const Rng& rng) {
    if (m.cfg.task != Task::asr && m.cfg.task != Task::st) {
        throw ContractError("encode() is the asr/st frontend");
    }
    if (static_cast<int64_t>(lengths.size()) != feats.dim(0)) {
        throw DimensionError("lengths size must match batch");
    }
    for (int64_t l : lengths) {
        if (l > feats.dim(1)) throw DimensionError("length exceeds padded time extent");
    }
    auto sub = subsample(feats, lengths, m.subsampler);
    return run_encoder_blocks(m, sub.out, sub.lengths, train, rng.child(uint64_t(0x10)));
}

template <class Real>
Tensor<Real> ctc_head(const Model<Real>& m, Tensor<Real> enc_h) {
    return linear(enc_h, m.ctc_w, m.ctc_b);
}

// ---------------------------------------------------------------------------
// Transformer decoder (pre-norm, absolute sinusoidal positions, causal).
// tokens are padded with any valid id; loss masking handles pads, and the
// causal mask keeps valid positions independent of them.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> decoder_forward(const Model<Real>& m, Tensor<Real> enc_h,
                             const std::vector<int64_t>& enc_lengths,
                             const std::vector<int64_t>& tokens, int64_t B, int64_t L, bool train,
                             const Rng& rng) {
    const int64_t d = m.cfg.d_att;
    auto h = scale_op(embedding(m.dec_embed, tokens, {B, L}), std::sqrt(static_cast<double>(d)));
    h = add(h, abs_pos_table<Real>(L, d));
    auto self_mask = causal_mask<Real>(L);
    auto src_mask = key_padding_mask<Real>(enc_lengths, enc_h.dim(1));
    for (size_t i = 0; i < m.dec.size(); ++i) {
        const auto& p = m.dec[static_cast<size_t>(i)];
        const Rng r = rng.child(0x200 + i);
        auto sa = mhsa(apply_ln(h, p.ln_self), p.self_attn, Tensor<Real>(), self_mask, p.scale_per_head);
        h = add(h, dropout(sa, p.dropout_rate, train, r.child(uint64_t(1))));
        auto ca = cross_attention(apply_ln(h, p.ln_src), enc_h, p.src_attn, src_mask, p.scale_per_head);
        h = add(h, dropout(ca, p.dropout_rate, train, r.child(uint64_t(2))));
        auto f = ffn(apply_ln(h, p.ln_ffn), p.ffn);
        h = add(h, dropout(f, p.dropout_rate, train, r.child(uint64_t(3))));
    }
    h = apply_ln(h, m.dec_ln_final);
    return linear(h, m.dec_out_w, m.dec_out_b);  // [B, L, vocab+2]
}

// Next-token logits for a single prefix (must begin with BOS).
template <class Real>
Tensor<Real> decode_step(const Model<Real>& m, const std::vector<int64_t>& prefix, Tensor<Real> enc_h,
                         const std::vector<int64_t>& enc_lengths) {
    if (prefix.empty() || prefix.front() != m.bos_id()) {
        throw ContractError("decoder prefix must begin with BOS");
    }
    const int64_t L = static_cast<int64_t>(prefix.size());
    auto logits = decoder_forward(m, enc_h, enc_lengths, prefix, 1, L, /*train=*/false, Rng(0));
    return reshape(narrow(logits, 1, L - 1, 1), {m.dec_vocab()});
}

// ---------------------------------------------------------------------------
// Separation head: frame-rate-preserving encoder, then a linear + ReLU mask
// estimator, one non-negative mask per speaker.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> ss_forward(const Model<Real>& m, Tensor<Real> mag, const std::vector<int64_t>& lengths,
                        bool train, const Rng& rng) {
    if (m.cfg.task != Task::ss) throw ContractError("ss_forward needs an ss model");
    if (mag.dim(2) != m.cfg.feat_dim) {
        throw DimensionError("feature width " + std::to_string(mag.dim(2)) + " does not match config " +
                             std::to_string(m.cfg.feat_dim));
    }
    const int64_t B = mag.dim(0), T = mag.dim(1);
    auto h = linear(mag, m.ss_in_w, m.ss_in_b);
    auto er = run_encoder_blocks(m, h, lengths, train, rng.child(uint64_t(0x11)));
    auto y = activation(linear(er.h, m.mask_w, m.mask_b), Act::relu);
    return permute(reshape(y, {B, T, m.cfg.ss_speakers, m.cfg.feat_dim}), {0, 2, 1, 3});
}

// ---------------------------------------------------------------------------
// Synthesis model: token embedding -> encoder blocks -> duration predictor
// (log domain) -> length regulation -> decoder blocks (self-attention only)
// -> linear feature head.
// ---------------------------------------------------------------------------

template <class Real>
struct TtsResult {
    Tensor<Real> feats;                           // [B, T_feat, D]
    Tensor<Real> dur_pred_log;                    // [B, L]
    std::vector<int64_t> frame_lengths;           // valid frames per sample
    std::vector<std::vector<int64_t>> durations;  // durations actually used
};

template <class Real>
TtsResult<Real> tts_forward(const Model<Real>& m, const std::vector<int64_t>& tokens, int64_t B,
                            int64_t L, const std::vector<int64_t>& token_lengths,
                            const std::vector<std::vector<int64_t>>* gt_durations, bool train,
                            const Rng& rng) {
    if (m.cfg.task != Task::tts) throw ContractError("tts_forward needs a tts model");
    if (train && gt_durations == nullptr) {
        throw ContractError("training mode needs ground-truth durations");
    }
    auto h = embedding(m.tts_embed, tokens, {B, L});
    auto attn_mask = key_padding_mask<Real>(token_lengths, L);
    auto pad_mask = frame_mask<Real>(token_lengths, L);
    Tensor<Real> rel;
    if (m.cfg.use_rel_pos) {
        rel = rel_pos_table<Real>(L, m.cfg.d_att);
    } else {
        h = add(h, abs_pos_table<Real>(L, m.cfg.d_att));
    }
    const Rng enc_rng = rng.child(uint64_t(0x12));
    for (size_t i = 0; i < m.enc.size(); ++i) {
        h = conformer_block(h, m.enc[i], rel, attn_mask, pad_mask, train, enc_rng.child(0x100 + i));
    }

    TtsResult<Real> out;
    out.dur_pred_log = duration_predictor(h, m.dur, train, rng.child(uint64_t(0x13)));

    // durations: ground truth when training, rounded exp(prediction) >= 1 otherwise
    out.durations.assign(static_cast<size_t>(B), {});
    for (int64_t b = 0; b < B; ++b) {
        const int64_t lb = token_lengths[static_cast<size_t>(b)];
        for (int64_t i = 0; i < lb; ++i) {
            int64_t dur;
            if (gt_durations != nullptr) {
                dur = (*gt_durations)[static_cast<size_t>(b)][static_cast<size_t>(i)];
                if (dur < 0) throw ContractError("negative duration");
            } else {
                const double p = static_cast<double>(out.dur_pred_log.values()[b * L + i]);
                dur = std::max<int64_t>(1, static_cast<int64_t>(std::llround(std::exp(p))));
            }
            out.durations[static_cast<size_t>(b)].push_back(dur);
        }
    }

    int64_t t_max = 0;
    out.frame_lengths.assign(static_cast<size_t>(B), 0);
    for (int64_t b = 0; b < B; ++b) {
        int64_t total = 0;
        for (int64_t d : out.durations[static_cast<size_t>(b)]) total += d;
        if (total == 0) throw ContractError("total duration is zero; no frames to synthesize");
        out.frame_lengths[static_cast<size_t>(b)] = total;
        t_max = std::max(t_max, total);
    }

    std::vector<std::vector<int64_t>> gather(static_cast<size_t>(B),
                                             std::vector<int64_t>(static_cast<size_t>(t_max), -1));
    for (int64_t b = 0; b < B; ++b) {
        int64_t t = 0;
        for (size_t i = 0; i < out.durations[static_cast<size_t>(b)].size(); ++i) {
            for (int64_t r = 0; r < out.durations[static_cast<size_t>(b)][i]; ++r) {
                gather[static_cast<size_t>(b)][static_cast<size_t>(t++)] = static_cast<int64_t>(i);
            }
        }
    }
    auto reg = gather_time(h, gather);

    auto dec_attn = key_padding_mask<Real>(out.frame_lengths, t_max);
    auto dec_pad = frame_mask<Real>(out.frame_lengths, t_max);
    Tensor<Real> dec_rel;
    if (m.cfg.use_rel_pos) {
        dec_rel = rel_pos_table<Real>(t_max, m.cfg.d_att);
    } else {
        reg = add(reg, abs_pos_table<Real>(t_max, m.cfg.d_att));
    }
    const Rng dec_rng = rng.child(uint64_t(0x14));
    for (size_t i = 0; i < m.tts_dec.size(); ++i) {
        reg = conformer_block(reg, m.tts_dec[i], dec_rel, dec_attn, dec_pad, train, dec_rng.child(0x100 + i));
    }
    out.feats = linear(reg, m.tts_out_w, m.tts_out_b);
    return out;
}

}  // namespace cfmr
