#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "cfmr/gradcheck.hpp"
#include "cfmr/model.hpp"

using namespace cfmr;

namespace {

ModelConfig tiny_asr() {
    ModelConfig c;
    c.task = Task::asr;
    c.enc_blocks = 2;
    c.dec_blocks = 1;
    c.d_att = 16;
    c.d_ff = 24;
    c.heads = 2;
    c.kernel = 3;
    c.vocab = 5;
    c.feat_dim = 9;
    c.subsample_channels = 2;
    c.dropout = 0.1;
    return c;
}

template <class Real>
Tensor<Real> rand_tensor(Shape shape, uint64_t seed, Real lo = Real(-1), Real hi = Real(1)) {
    return Tensor<Real>::uniform(std::move(shape), Rng(seed), lo, hi);
}

}  // namespace

TEST_CASE("param store basics") {
    ParamStore<double> s;
    CHECK(count_params(s) == 0);
    s.add("a", TensorD::zeros({2, 3}, true));
    CHECK(count_params(s) == 6);
    s.add("b", TensorD::zeros({4}, false));  // non-trainable, not counted
    CHECK(count_params(s) == 6);
    CHECK_THROWS_AS(s.add("a", TensorD::zeros({1})), ConfigError);
    CHECK_THROWS_AS(s.at("missing"), ContractError);
}

TEST_CASE("build_model is deterministic in the seed") {
    auto cfg = tiny_asr();
    auto m1 = build_model<float>(cfg, 42);
    auto m2 = build_model<float>(cfg, 42);
    REQUIRE(m1.store.size() == m2.store.size());
    for (size_t i = 0; i < m1.store.size(); ++i) {
        CHECK(m1.store.names()[i] == m2.store.names()[i]);
        CHECK(m1.store.tensor(i).values() == m2.store.tensor(i).values());
    }
    auto m3 = build_model<float>(cfg, 43);
    CHECK(m3.store.at("enc.block0.ffn1.w1").values() != m1.store.at("enc.block0.ffn1.w1").values());
}

TEST_CASE("preset structure: block counts and heads") {
    auto def = build_model<float>(preset_config("default"), 1);
    int blocks = 0;
    while (def.store.has("enc.block" + std::to_string(blocks) + ".ffn1.w1")) ++blocks;
    CHECK(blocks == 12);
    CHECK(def.store.has("enc.block3.conv.dw.weight"));

    auto ss = build_model<float>(preset_config("ss"), 1);
    blocks = 0;
    while (ss.store.has("enc.block" + std::to_string(blocks) + ".ffn1.w1")) ++blocks;
    CHECK(blocks == 3);
    CHECK(ss.store.has("ss.mask.weight"));

    CHECK_THROWS_AS(preset_config("nope"), ConfigError);
    ModelConfig bad = tiny_asr();
    bad.kernel = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter budgets: conformer vs small vs transformer control") {
    auto full = build_model<float>(preset_config("default"), 1);
    auto small = build_model<float>(preset_config("st-small"), 1);
    auto plain = build_model<float>(preset_config("transformer"), 1);

    const double nf = static_cast<double>(count_params(full.store)) / 1e6;
    const double ns = static_cast<double>(count_params(small.store)) / 1e6;
    const double nt = static_cast<double>(count_params(plain.store)) / 1e6;

    CHECK(std::abs(nf - 43.5) / 43.5 < 0.10);
    CHECK(std::abs(ns - 30.9) / 30.9 < 0.10);
    CHECK(ns < nt);
    CHECK(nt < nf);
}

TEST_CASE("conformer block: residual path is the identity when projections are zero") {
    auto cfg = tiny_asr();
    auto m = build_model<double>(cfg, 7);
    auto& blk = m.enc[0];
    auto zero_out = [](Tensor<double> t) {
        for (auto& v : t.mutable_values()) v = 0.0;
    };
    // zero every sub-module output projection (weights were random); biases
    // are zero from initialization
    zero_out(blk.ffn1.w2);
    zero_out(blk.ffn2.w2);
    zero_out(blk.mhsa.wo);
    zero_out(blk.conv.pw2_w);

    auto x = rand_tensor<double>({1, 5, cfg.d_att}, 70);
    auto rel = rel_pos_table<double>(5, cfg.d_att);
    auto y = conformer_block(x, blk, rel, TensorD(), TensorD(), /*train=*/false, Rng(0));
    auto ref = apply_ln(x, blk.ln_final);
    CHECK(y.values() == ref.values());  // exact: residual adds exact zeros
}

TEST_CASE("conformer block: half-step increments are exactly half the module outputs") {
    auto cfg = tiny_asr();
    auto m = build_model<double>(cfg, 8);
    auto x = rand_tensor<double>({1, 4, cfg.d_att}, 80);
    auto rel = rel_pos_table<double>(4, cfg.d_att);
    BlockTrace<double> tr;
    conformer_block(x, m.enc[0], rel, TensorD(), TensorD(), /*train=*/false, Rng(0), &tr);
    REQUIRE(tr.ffn1_out.defined());
    for (size_t i = 0; i < tr.ffn1_out.values().size(); ++i) {
        CHECK(tr.ffn1_inc.values()[i] == 0.5 * tr.ffn1_out.values()[i]);
        CHECK(tr.ffn2_inc.values()[i] == 0.5 * tr.ffn2_out.values()[i]);
        CHECK(tr.mhsa_inc.values()[i] == tr.mhsa_out.values()[i]);
        CHECK(tr.conv_inc.values()[i] == tr.conv_out.values()[i]);
    }
}

TEST_CASE("conformer block gradient") {
    ModelConfig cfg = tiny_asr();
    cfg.d_att = 8;
    cfg.d_ff = 12;
    cfg.kernel = 3;
    auto m = build_model<double>(cfg, 9);
    auto x = rand_tensor<double>({1, 4, cfg.d_att}, 90);
    auto s = rand_tensor<double>({1, 4, cfg.d_att}, 91);

    std::vector<std::pair<std::string, TensorD>> leaves;
    leaves.emplace_back("x", x);
    for (const auto& name : m.store.names()) {
        if (name.rfind("enc.block0.", 0) == 0 && m.store.at(name).requires_grad()) {
            leaves.emplace_back(name, m.store.at(name));
        }
    }
    auto rep = grad_check<double>(
        leaves,
        [&]() {
            auto& blk = m.enc[0];
            blk.conv.bn.run_mean = TensorD::zeros({cfg.d_att});
            blk.conv.bn.run_var = TensorD::full({cfg.d_att}, 1.0);
            auto rel = rel_pos_table<double>(4, cfg.d_att);
            return sum_all(mul(conformer_block(x, blk, rel, TensorD(), TensorD(), true, Rng(0)), s));
        },
        1e-5);
    INFO("worst: ", rep.worst, " abs: ", rep.max_abs_err);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("encode: zero blocks equals the subsampler output") {
    auto cfg = tiny_asr();
    cfg.enc_blocks = 0;
    auto m = build_model<double>(cfg, 10);
    auto x = rand_tensor<double>({1, 17, cfg.feat_dim}, 100);
    auto enc = encode(m, x, {17}, false, Rng(0));
    auto sub = subsample(x, {17}, m.subsampler);
    CHECK(enc.h.values() == sub.out.values());
    CHECK(enc.lengths == sub.lengths);
}

TEST_CASE("encode: padding invariance on valid frames") {
    auto cfg = tiny_asr();
    auto m = build_model<double>(cfg, 11);
    const int64_t T1 = 20, T2 = 33, F = cfg.feat_dim;
    auto a = rand_tensor<double>({1, T1, F}, 110);
    auto b = rand_tensor<double>({1, T2, F}, 111);

    auto solo = encode(m, a, {T1}, false, Rng(0));

    auto batch = TensorD::zeros({2, T2, F});
    for (int64_t t = 0; t < T1; ++t) {
        for (int64_t f = 0; f < F; ++f) batch.mutable_values()[t * F + f] = a.values()[t * F + f];
    }
    for (int64_t t = 0; t < T2; ++t) {
        for (int64_t f = 0; f < F; ++f) batch.mutable_values()[(T2 + t) * F + f] = b.values()[t * F + f];
    }
    auto joint = encode(m, batch, {T1, T2}, false, Rng(0));

    const int64_t Tv = solo.lengths[0];
    CHECK(joint.lengths[0] == Tv);
    double max_diff = 0;
    for (int64_t t = 0; t < Tv; ++t) {
        for (int64_t c = 0; c < cfg.d_att; ++c) {
            max_diff = std::max(max_diff, std::abs(joint.h.values()[(0 * joint.h.dim(1) + t) * cfg.d_att + c] -
                                                   solo.h.values()[t * cfg.d_att + c]));
        }
    }
    CHECK(max_diff < 1e-5);
}

TEST_CASE("encode: default preset output shape") {
    auto cfg = preset_config("default");
    cfg.enc_blocks = 1;  // shape arithmetic only; keep the test quick
    auto m = build_model<float>(cfg, 12);
    auto x = rand_tensor<float>({1, 64, 83}, 120, -0.5f, 0.5f);
    auto enc = encode(m, x, {64}, false, Rng(0));
    CHECK(enc.h.shape() == Shape{1, 15, 256});
    CHECK(enc.lengths == std::vector<int64_t>{15});
}

TEST_CASE("decoder causality is exact") {
    auto cfg = tiny_asr();
    auto m = build_model<double>(cfg, 13);
    auto enc_h = rand_tensor<double>({1, 6, cfg.d_att}, 130);
    std::vector<int64_t> enc_len{6};

    std::vector<int64_t> p1{m.bos_id(), 3, 1};
    std::vector<int64_t> p2{m.bos_id(), 3, 1, 2};
    auto l1 = decoder_forward(m, enc_h, enc_len, p1, 1, 3, false, Rng(0));
    auto l2 = decoder_forward(m, enc_h, enc_len, p2, 1, 4, false, Rng(0));
    for (int64_t pos = 0; pos < 3; ++pos) {
        for (int64_t v = 0; v < m.dec_vocab(); ++v) {
            CHECK(l1.values()[pos * m.dec_vocab() + v] == l2.values()[pos * m.dec_vocab() + v]);
        }
    }

    CHECK_THROWS_AS(decoder_forward(m, enc_h, enc_len, {m.bos_id(), 99}, 1, 2, false, Rng(0)),
                    ContractError);
    CHECK_THROWS_AS(decode_step(m, {3, 1}, enc_h, enc_len), ContractError);  // missing BOS
}

TEST_CASE("decoder with zeroed source-attention output ignores the encoder") {
    auto cfg = tiny_asr();
    auto m = build_model<double>(cfg, 14);
    for (auto& v : m.dec[0].src_attn.wo.mutable_values()) v = 0.0;
    auto e1 = rand_tensor<double>({1, 5, cfg.d_att}, 140);
    auto e2 = rand_tensor<double>({1, 5, cfg.d_att}, 141);
    auto s1 = decode_step(m, {m.bos_id(), 2}, e1, {5});
    auto s2 = decode_step(m, {m.bos_id(), 2}, e2, {5});
    CHECK(s1.values() == s2.values());
}

TEST_CASE("ss_forward masks are non-negative with the right shape") {
    ModelConfig cfg;
    cfg.task = Task::ss;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 0;
    cfg.d_att = 16;
    cfg.d_ff = 24;
    cfg.heads = 2;
    cfg.kernel = 3;
    cfg.feat_dim = 17;
    cfg.ss_speakers = 2;
    auto m = build_model<double>(cfg, 15);
    auto mag = rand_tensor<double>({2, 9, 17}, 150, 0.0, 1.0);
    auto masks = ss_forward(m, mag, {9, 7}, false, Rng(0));
    CHECK(masks.shape() == Shape{2, 2, 9, 17});
    for (double v : masks.values()) CHECK(v >= 0.0);

    cfg.ss_speakers = 1;
    auto m1 = build_model<double>(cfg, 16);
    CHECK(ss_forward(m1, mag, {9, 9}, false, Rng(0)).shape() == Shape{2, 1, 9, 17});
}

TEST_CASE("tts_forward length regulation") {
    ModelConfig cfg;
    cfg.task = Task::tts;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 0;  // isolate the regulator
    cfg.d_att = 8;
    cfg.d_ff = 12;
    cfg.heads = 2;
    cfg.kernel = 3;
    cfg.vocab = 6;
    cfg.tts_feat_dim = 4;
    cfg.dur_hidden = 4;
    cfg.dropout = 0.0;
    auto m = build_model<double>(cfg, 17);

    // durations all 1: one frame per token
    std::vector<std::vector<int64_t>> ones{{1, 1, 1}};
    auto r1 = tts_forward(m, {1, 2, 3}, 1, 3, {3}, &ones, true, Rng(0));
    CHECK(r1.feats.dim(1) == 3);
    CHECK(r1.frame_lengths == std::vector<int64_t>{3});

    // durations [2, 3]: frames 0-1 from token 0, frames 2-4 from token 1
    std::vector<std::vector<int64_t>> d23{{2, 3}};
    auto r2 = tts_forward(m, {4, 5}, 1, 2, {2}, &d23, true, Rng(0));
    CHECK(r2.feats.dim(1) == 5);
    const int64_t D = cfg.tts_feat_dim;
    for (int64_t c = 0; c < D; ++c) {
        CHECK(r2.feats.values()[0 * D + c] == r2.feats.values()[1 * D + c]);
        CHECK(r2.feats.values()[2 * D + c] == r2.feats.values()[3 * D + c]);
        CHECK(r2.feats.values()[2 * D + c] == r2.feats.values()[4 * D + c]);
    }

    std::vector<std::vector<int64_t>> zeros{{0, 0}};
    CHECK_THROWS_AS(tts_forward(m, {4, 5}, 1, 2, {2}, &zeros, true, Rng(0)), ContractError);

    // inference path: predicted durations are rounded with a floor of 1
    auto ri = tts_forward(m, {1, 2, 3}, 1, 3, {3}, nullptr, false, Rng(0));
    for (int64_t d : ri.durations[0]) CHECK(d >= 1);
    CHECK(ri.dur_pred_log.shape() == Shape{1, 3});
}

TEST_CASE("whole-model gradient check on a tiny configuration") {
    ModelConfig cfg;
    cfg.task = Task::asr;
    cfg.enc_blocks = 1;
    cfg.dec_blocks = 1;
    cfg.d_att = 8;
    cfg.d_ff = 16;
    cfg.heads = 2;
    cfg.kernel = 3;
    cfg.vocab = 4;
    cfg.feat_dim = 7;
    cfg.subsample_channels = 2;
    cfg.dropout = 0.0;
    auto m = build_model<double>(cfg, 18);

    // fill in the zero-initialized tensors (biases, attention position biases)
    // so no activation collapses to an exactly constant sequence, which would
    // park layer norm on its zero-variance singularity
    for (const auto& name : m.store.names()) {
        auto& t = m.store.at(name);
        if (!t.requires_grad()) continue;
        bool all_zero = true;
        for (double v : t.values()) all_zero = all_zero && v == 0.0;
        if (all_zero) {
            Rng r = Rng(999).child(name);
            for (size_t i = 0; i < t.mutable_values().size(); ++i) {
                t.mutable_values()[i] = r.uniform(i, -0.1, 0.1);
            }
        }
    }

    auto x = rand_tensor<double>({1, 12, cfg.feat_dim}, 180);
    std::vector<int64_t> toks{m.bos_id(), 1, 2};
    auto se = rand_tensor<double>({1, 3, m.dec_vocab()}, 181);
    auto sc = rand_tensor<double>({1, 2, m.ctc_classes()}, 182);

    std::vector<std::pair<std::string, TensorD>> leaves;
    for (const auto& name : m.store.names()) {
        if (m.store.at(name).requires_grad()) leaves.emplace_back(name, m.store.at(name));
    }
    auto rep = grad_check<double>(
        leaves,
        [&]() {
            m.enc[0].conv.bn.run_mean = TensorD::zeros({cfg.d_att});
            m.enc[0].conv.bn.run_var = TensorD::full({cfg.d_att}, 1.0);
            auto enc = encode(m, x, {12}, true, Rng(0));
            auto dec = decoder_forward(m, enc.h, enc.lengths, toks, 1, 3, true, Rng(0));
            auto ctc = ctc_head(m, enc.h);
            return add(sum_all(mul(dec, se)), sum_all(mul(ctc, sc)));
        },
        1e-5);
    INFO("worst: ", rep.worst, " abs: ", rep.max_abs_err);
    CHECK(rep.max_rel_err < 1e-4);
}
