#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "cfmr/gradcheck.hpp"
#include "cfmr/nn.hpp"

using namespace cfmr;

namespace {

template <class Real>
Tensor<Real> rand_tensor(Shape shape, uint64_t seed, Real lo = Real(-1), Real hi = Real(1)) {
    return Tensor<Real>::uniform(std::move(shape), Rng(seed), lo, hi);
}

// Brute-force multi-head attention with the relative-position score term,
// computed with plain loops over a single batch element.
std::vector<double> naive_mhsa(const TensorD& x, const MhsaParams<double>& p, const TensorD& rel,
                               double scale_denom) {
    const int64_t T = x.dim(1), d = x.dim(2);
    const int64_t H = p.heads, dh = d / H;
    auto matvec = [&](const TensorD& w, int64_t row) {
        std::vector<double> out(d, 0.0);
        for (int64_t c = 0; c < d; ++c) {
            for (int64_t k = 0; k < d; ++k) out[c] += x.values()[row * d + k] * w.values()[k * d + c];
        }
        return out;
    };
    std::vector<std::vector<double>> Q, K, V;
    for (int64_t t = 0; t < T; ++t) {
        Q.push_back(matvec(p.wq, t));
        K.push_back(matvec(p.wk, t));
        V.push_back(matvec(p.wv, t));
    }
    std::vector<std::vector<double>> P;  // rel table projected by wpos
    if (rel.defined()) {
        for (int64_t m = 0; m < 2 * T - 1; ++m) {
            std::vector<double> row(d, 0.0);
            for (int64_t c = 0; c < d; ++c) {
                for (int64_t k = 0; k < d; ++k) row[c] += rel.values()[m * d + k] * p.wpos.values()[k * d + c];
            }
            P.push_back(row);
        }
    }
    std::vector<double> ctx(T * d, 0.0);  // concatenated heads
    for (int64_t h = 0; h < H; ++h) {
        for (int64_t i = 0; i < T; ++i) {
            std::vector<double> scores(T);
            for (int64_t j = 0; j < T; ++j) {
                double s = 0;
                for (int64_t c = 0; c < dh; ++c) {
                    const double qi = Q[i][h * dh + c] + p.u.values()[h * dh + c];
                    s += qi * K[j][h * dh + c];
                }
                if (rel.defined()) {
                    const int64_t m = T - 1 - i + j;
                    for (int64_t c = 0; c < dh; ++c) {
                        const double qi = Q[i][h * dh + c] + p.v.values()[h * dh + c];
                        s += qi * P[m][h * dh + c];
                    }
                }
                scores[j] = s / std::sqrt(scale_denom);
            }
            const double mx = *std::max_element(scores.begin(), scores.end());
            double z = 0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (int64_t j = 0; j < T; ++j) {
                for (int64_t c = 0; c < dh; ++c) {
                    ctx[i * d + h * dh + c] += scores[j] / z * V[j][h * dh + c];
                }
            }
        }
    }
    std::vector<double> out(T * d, 0.0);
    for (int64_t i = 0; i < T; ++i) {
        for (int64_t c = 0; c < d; ++c) {
            for (int64_t k = 0; k < d; ++k) out[i * d + c] += ctx[i * d + k] * p.wo.values()[k * d + c];
        }
    }
    return out;
}

MhsaParams<double> rand_mhsa(int64_t d, int64_t H, bool with_pos, uint64_t seed) {
    MhsaParams<double> p;
    p.wq = rand_tensor<double>({d, d}, seed + 1);
    p.wk = rand_tensor<double>({d, d}, seed + 2);
    p.wv = rand_tensor<double>({d, d}, seed + 3);
    p.wo = rand_tensor<double>({d, d}, seed + 4);
    p.heads = H;
    p.u = rand_tensor<double>({H, 1, d / H}, seed + 5, -0.5, 0.5);
    if (with_pos) {
        p.v = rand_tensor<double>({H, 1, d / H}, seed + 6, -0.5, 0.5);
        p.wpos = rand_tensor<double>({d, d}, seed + 7);
    }
    return p;
}

}  // namespace

TEST_CASE("scaled_dot_attention single position returns V") {
    auto q = rand_tensor<double>({1, 1, 4}, 1);
    auto k = rand_tensor<double>({1, 1, 4}, 2);
    auto v = rand_tensor<double>({1, 1, 4}, 3);
    auto y = scaled_dot_attention(q, k, v, TensorD(), 0.5);
    for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(v.values()[i]));
}

TEST_CASE("scaled_dot_attention identical keys average V") {
    const int64_t T = 4, dh = 3;
    auto q = rand_tensor<double>({1, T, dh}, 11);
    auto k = TensorD::zeros({1, T, dh});
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t c = 0; c < dh; ++c) k.mutable_values()[t * dh + c] = 0.3 * (c + 1);
    }
    auto v = rand_tensor<double>({1, T, dh}, 12);
    auto y = scaled_dot_attention(q, k, v, TensorD(), 1.0 / std::sqrt(3.0));
    for (int64_t c = 0; c < dh; ++c) {
        double mean = 0;
        for (int64_t t = 0; t < T; ++t) mean += v.values()[t * dh + c] / T;
        for (int64_t t = 0; t < T; ++t) CHECK(y.values()[t * dh + c] == doctest::Approx(mean));
    }
}

TEST_CASE("scaled_dot_attention matches a brute-force loop") {
    const int64_t T = 3, dh = 5;
    auto q = rand_tensor<double>({1, T, dh}, 21);
    auto k = rand_tensor<double>({1, T, dh}, 22);
    auto v = rand_tensor<double>({1, T, dh}, 23);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto y = scaled_dot_attention(q, k, v, TensorD(), scale);
    for (int64_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        for (int64_t j = 0; j < T; ++j) {
            double acc = 0;
            for (int64_t c = 0; c < dh; ++c) acc += q.values()[i * dh + c] * k.values()[j * dh + c];
            s[j] = acc * scale;
        }
        double mx = *std::max_element(s.begin(), s.end()), z = 0;
        for (double& e : s) {
            e = std::exp(e - mx);
            z += e;
        }
        for (int64_t c = 0; c < dh; ++c) {
            double acc = 0;
            for (int64_t j = 0; j < T; ++j) acc += s[j] / z * v.values()[j * dh + c];
            CHECK(std::abs(y.values()[i * dh + c] - acc) < 1e-6);
        }
    }
}

TEST_CASE("fully masked attention rows are zeros, not NaN") {
    auto q = rand_tensor<double>({1, 2, 3}, 31);
    auto k = rand_tensor<double>({1, 2, 3}, 32);
    auto v = rand_tensor<double>({1, 2, 3}, 33);
    auto mask = TensorD::from({1, 2, 2}, {1, 1, 0, 0});  // row 1 sees nothing
    auto y = scaled_dot_attention(q, k, v, mask, 1.0);
    for (int c = 0; c < 3; ++c) CHECK(y.values()[1 * 3 + c] == 0.0);
}

TEST_CASE("mhsa single head without position term reduces to scaled_dot_attention + wo") {
    const int64_t T = 4, d = 6;
    auto x = rand_tensor<double>({1, T, d}, 41);
    auto p = rand_mhsa(d, 1, false, 400);
    auto y = mhsa(x, p, TensorD(), TensorD());

    // u is a query bias: fold it in by adding u to q after projection
    auto q = add(matmul(x, p.wq), reshape(p.u, {d}));
    auto k = matmul(x, p.wk);
    auto v = matmul(x, p.wv);
    auto ref = matmul(scaled_dot_attention(q, k, v, TensorD(), 1.0 / std::sqrt(double(d))), p.wo);
    for (size_t i = 0; i < y.values().size(); ++i) {
        CHECK(y.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-10));
    }
}

TEST_CASE("mhsa with zero output projection is zero") {
    const int64_t d = 8;
    auto x = rand_tensor<double>({2, 3, d}, 51);
    auto p = rand_mhsa(d, 2, true, 500);
    p.wo = TensorD::zeros({d, d});
    auto rel = rel_pos_table<double>(3, d);
    auto y = mhsa(x, p, rel, TensorD());
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("mhsa matches the naive per-head oracle including the relative term") {
    const int64_t T = 5, d = 8, H = 4;
    auto x = rand_tensor<double>({1, T, d}, 61);
    auto p = rand_mhsa(d, H, true, 600);
    auto rel = rel_pos_table<double>(T, d);
    auto y = mhsa(x, p, rel, TensorD());
    auto ref = naive_mhsa(x, p, rel, static_cast<double>(d));
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-5);

    // per-head scaling switch changes only the score denominator
    auto y2 = mhsa(x, p, rel, TensorD(), /*scale_per_head=*/true);
    auto ref2 = naive_mhsa(x, p, rel, static_cast<double>(d / H));
    for (size_t i = 0; i < ref2.size(); ++i) CHECK(std::abs(y2.values()[i] - ref2[i]) < 1e-5);
}

TEST_CASE("mhsa is permutation-equivariant without positions or mask") {
    const int64_t T = 6, d = 4;
    auto x = rand_tensor<double>({1, T, d}, 71);
    auto p = rand_mhsa(d, 2, false, 700);
    std::vector<int64_t> pi{3, 0, 5, 1, 4, 2};
    auto xp = TensorD::zeros({1, T, d});
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t c = 0; c < d; ++c) xp.mutable_values()[t * d + c] = x.values()[pi[t] * d + c];
    }
    auto y = mhsa(x, p, TensorD(), TensorD());
    auto yp = mhsa(xp, p, TensorD(), TensorD());
    for (int64_t t = 0; t < T; ++t) {
        for (int64_t c = 0; c < d; ++c) {
            CHECK(yp.values()[t * d + c] == doctest::Approx(y.values()[pi[t] * d + c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("mhsa gradient including relative term") {
    const int64_t T = 4, d = 6, H = 2;
    auto x = rand_tensor<double>({1, T, d}, 81);
    auto p = rand_mhsa(d, H, true, 800);
    auto s = rand_tensor<double>({1, T, d}, 82);
    auto rep = grad_check<double>(
        {{"x", x}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}, {"wo", p.wo}, {"u", p.u}, {"v", p.v}, {"wpos", p.wpos}},
        [&]() { return sum_all(mul(mhsa(x, p, rel_pos_table<double>(T, d), TensorD()), s)); }, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("rel_pos_table") {
    const int64_t T = 4, d = 8;
    auto t = rel_pos_table<double>(T, d);
    CHECK(t.shape() == Shape{2 * T - 1, d});
    // offset 0 is row T-1: sin columns 0, cos columns 1
    for (int64_t i = 0; i < d; ++i) {
        CHECK(t.values()[(T - 1) * d + i] == doctest::Approx(i % 2 == 0 ? 0.0 : 1.0));
    }
    CHECK(rel_pos_table<double>(1, d).shape() == Shape{1, d});
    // offsets +k / -k: cos columns agree, sin columns negate
    for (int64_t k = 1; k < T; ++k) {
        const int64_t mp = T - 1 - k, mn = T - 1 + k;
        for (int64_t i = 0; i < d; ++i) {
            if (i % 2 == 0) {
                CHECK(t.values()[mp * d + i] == doctest::Approx(-t.values()[mn * d + i]));
            } else {
                CHECK(t.values()[mp * d + i] == doctest::Approx(t.values()[mn * d + i]));
            }
        }
    }
    // pure function: bit-identical across calls
    auto t2 = rel_pos_table<double>(T, d);
    CHECK(t.values() == t2.values());
}

namespace {

ConvModuleParams<double> rand_conv_module(int64_t C, int64_t k, uint64_t seed) {
    ConvModuleParams<double> p;
    p.pw1_w = rand_tensor<double>({2 * C, C, 1}, seed + 1, -0.4, 0.4);
    p.pw1_b = rand_tensor<double>({2 * C}, seed + 2, -0.2, 0.2);
    p.dw_w = rand_tensor<double>({C, 1, k}, seed + 3, -0.4, 0.4);
    p.dw_b = rand_tensor<double>({C}, seed + 4, -0.2, 0.2);
    p.bn.gamma = rand_tensor<double>({C}, seed + 5, 0.5, 1.5);
    p.bn.beta = rand_tensor<double>({C}, seed + 6, -0.2, 0.2);
    p.bn.run_mean = TensorD::zeros({C});
    p.bn.run_var = TensorD::full({C}, 1.0);
    p.pw2_w = rand_tensor<double>({C, C, 1}, seed + 7, -0.4, 0.4);
    p.pw2_b = rand_tensor<double>({C}, seed + 8, -0.2, 0.2);
    p.kernel = k;
    return p;
}

}  // namespace

TEST_CASE("conv_module zero map and composition collapse") {
    const int64_t C = 4;
    auto x = rand_tensor<double>({1, 5, C}, 91);

    ConvModuleParams<double> zero;
    zero.pw1_w = TensorD::zeros({2 * C, C, 1});
    zero.pw1_b = TensorD::zeros({2 * C});
    zero.dw_w = TensorD::zeros({C, 1, 1});
    zero.dw_b = TensorD::zeros({C});
    zero.bn.gamma = TensorD::full({C}, 1.0);
    zero.bn.beta = TensorD::zeros({C});
    zero.bn.run_mean = TensorD::zeros({C});
    zero.bn.run_var = TensorD::full({C}, 1.0);
    zero.pw2_w = TensorD::zeros({C, C, 1});
    zero.pw2_b = TensorD::zeros({C});
    zero.kernel = 1;
    auto y0 = conv_module(x, zero, TensorD(), /*train=*/false);
    for (double v : y0.values()) CHECK(v == 0.0);

    // identities everywhere, saturated GLU gate -> swish(x)
    ConvModuleParams<double> id = zero;
    id.pw1_w = TensorD::zeros({2 * C, C, 1});
    for (int64_t c = 0; c < C; ++c) id.pw1_w.mutable_values()[(c * C + c)] = 1.0;
    id.pw1_b = TensorD::zeros({2 * C});
    for (int64_t c = 0; c < C; ++c) id.pw1_b.mutable_values()[C + c] = 40.0;  // gate saturates
    id.dw_w = TensorD::full({C, 1, 1}, 1.0);
    id.bn.eps = 0.0;
    id.pw2_w = TensorD::zeros({C, C, 1});
    for (int64_t c = 0; c < C; ++c) id.pw2_w.mutable_values()[(c * C + c)] = 1.0;
    auto y1 = conv_module(x, id, TensorD(), /*train=*/false);
    auto ref = activation(x, Act::swish);
    for (size_t i = 0; i < ref.values().size(); ++i) {
        CHECK(y1.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-9));
    }

    CHECK_THROWS_AS(conv_module(x, rand_conv_module(C, 4, 900), TensorD(), false), ConfigError);
    CHECK_THROWS_AS(conv_module(TensorD::zeros({1, 1, C}), rand_conv_module(C, 5, 901), TensorD(), true),
                    ContractError);  // B*T < 2 in train mode
}

TEST_CASE("conv_module preserves (B, T) and grad-checks") {
    const int64_t B = 2, T = 7, C = 8, k = 5;
    auto x = rand_tensor<double>({B, T, C}, 101);
    auto p = rand_conv_module(C, k, 1000);
    auto s = rand_tensor<double>({B, T, C}, 102);
    auto y = conv_module(x, p, TensorD(), true);
    CHECK(y.shape() == Shape{B, T, C});

    auto rep = grad_check<double>(
        {{"x", x},
         {"pw1_w", p.pw1_w},
         {"pw1_b", p.pw1_b},
         {"dw_w", p.dw_w},
         {"dw_b", p.dw_b},
         {"bn_g", p.bn.gamma},
         {"bn_b", p.bn.beta},
         {"pw2_w", p.pw2_w},
         {"pw2_b", p.pw2_b}},
        [&]() {
            // fresh running stats per call so train-mode forwards are pure
            auto q = p;
            q.bn.run_mean = TensorD::zeros({C});
            q.bn.run_var = TensorD::full({C}, 1.0);
            return sum_all(mul(conv_module(x, q, TensorD(), true), s));
        },
        1e-5);
    CHECK(rep.max_rel_err < 1e-4);
    CHECK(rep.max_rel_err < 1e-6);  // 64-bit run is much tighter in practice
}

TEST_CASE("ffn") {
    const int64_t d = 4, dff = 6;
    auto x = rand_tensor<double>({2, 3, d}, 111);

    FfnParams<double> p;
    p.w1 = TensorD::zeros({d, dff});
    p.b1 = TensorD::zeros({dff});
    p.w2 = TensorD::zeros({dff, d});
    p.b2 = TensorD::from({d}, {1, 2, 3, 4});
    p.act = Act::relu;
    auto y = ffn(x, p);
    for (int64_t r = 0; r < 6; ++r) {
        for (int64_t c = 0; c < d; ++c) CHECK(y.values()[r * d + c] == doctest::Approx(p.b2.values()[c]));
    }

    // all-negative pre-activation with relu -> b2
    p.w1 = TensorD::zeros({d, dff});
    p.b1 = TensorD::full({dff}, -3.0);
    p.w2 = rand_tensor<double>({dff, d}, 112);
    auto y2 = ffn(x, p);
    for (int64_t r = 0; r < 6; ++r) {
        for (int64_t c = 0; c < d; ++c) CHECK(y2.values()[r * d + c] == doctest::Approx(p.b2.values()[c]));
    }

    FfnParams<double> pr;
    pr.w1 = rand_tensor<double>({d, dff}, 113);
    pr.b1 = rand_tensor<double>({dff}, 114);
    pr.w2 = rand_tensor<double>({dff, d}, 115);
    pr.b2 = rand_tensor<double>({d}, 116);
    pr.act = Act::swish;
    auto s = rand_tensor<double>({2, 3, d}, 117);
    auto rep = grad_check<double>({{"x", x}, {"w1", pr.w1}, {"b1", pr.b1}, {"w2", pr.w2}, {"b2", pr.b2}},
                                  [&]() { return sum_all(mul(ffn(x, pr), s)); }, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
    CHECK(ffn(x, pr).shape() == x.shape());
}

namespace {

SubsamplerParams<double> rand_subsampler(int64_t ch, int64_t F, int64_t d, uint64_t seed) {
    SubsamplerParams<double> p;
    p.channels = ch;
    p.c1_w = rand_tensor<double>({ch, 1, 3, 3}, seed + 1, -0.3, 0.3);
    p.c1_b = rand_tensor<double>({ch}, seed + 2, -0.1, 0.1);
    p.c2_w = rand_tensor<double>({ch, ch, 3, 3}, seed + 3, -0.3, 0.3);
    p.c2_b = rand_tensor<double>({ch}, seed + 4, -0.1, 0.1);
    const int64_t fo = subsampled_extent(subsampled_extent(F));
    p.proj_w = rand_tensor<double>({ch * fo, d}, seed + 5, -0.3, 0.3);
    p.proj_b = rand_tensor<double>({d}, seed + 6, -0.1, 0.1);
    return p;
}

}  // namespace

TEST_CASE("subsample length arithmetic") {
    CHECK(subsampled_length(16) == 3);  // 16 -> 7 -> 3
    CHECK(subsampled_length(7) == 1);
    CHECK_THROWS_AS(subsampled_length(6), DimensionError);

    const int64_t F = 9, d = 4, ch = 2;
    auto p = rand_subsampler(ch, F, d, 1200);
    auto x = rand_tensor<double>({2, 16, F}, 121);
    auto r = subsample(x, {16, 9}, p);
    CHECK(r.out.shape() == Shape{2, 3, d});
    CHECK(r.lengths == std::vector<int64_t>{3, 1});  // 16 -> 7 -> 3; 9 -> 4 -> 1
}

TEST_CASE("subsample per-sequence lengths match scalar arithmetic") {
    for (int64_t l = 7; l <= 40; ++l) {
        const int64_t once = (l - 3) / 2 + 1;
        CHECK(subsampled_length(l) == (once - 3) / 2 + 1);
    }
}

TEST_CASE("subsample gradient through both conv layers") {
    const int64_t F = 7, d = 3, ch = 2;
    auto p = rand_subsampler(ch, F, d, 1300);
    auto x = rand_tensor<double>({1, 8, F}, 131);
    auto s = rand_tensor<double>({1, 2, d}, 132);
    auto rep = grad_check<double>(
        {{"x", x}, {"c1w", p.c1_w}, {"c1b", p.c1_b}, {"c2w", p.c2_w}, {"c2b", p.c2_b}, {"pw", p.proj_w}, {"pb", p.proj_b}},
        [&]() { return sum_all(mul(subsample(x, {8}, p).out, s)); }, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("duration predictor shape and gradient") {
    const int64_t d = 4, dh = 5;
    DurPredictorParams<double> p;
    p.c1_w = rand_tensor<double>({dh, d, 3}, 141, -0.4, 0.4);
    p.c1_b = rand_tensor<double>({dh}, 142);
    p.ln1 = {rand_tensor<double>({dh}, 143, 0.5, 1.5), rand_tensor<double>({dh}, 144), 1e-12};
    p.c2_w = rand_tensor<double>({dh, dh, 3}, 145, -0.4, 0.4);
    p.c2_b = rand_tensor<double>({dh}, 146);
    p.ln2 = {rand_tensor<double>({dh}, 147, 0.5, 1.5), rand_tensor<double>({dh}, 148), 1e-12};
    p.out_w = rand_tensor<double>({dh, 1}, 149);
    p.out_b = rand_tensor<double>({1}, 150);
    p.dropout_rate = 0.0;

    auto x = rand_tensor<double>({2, 6, d}, 151);
    auto y = duration_predictor(x, p, false, Rng(0));
    CHECK(y.shape() == Shape{2, 6});

    auto s = rand_tensor<double>({2, 6}, 152);
    auto rep = grad_check<double>({{"x", x}, {"c1w", p.c1_w}, {"c2w", p.c2_w}, {"ow", p.out_w}},
                                  [&]() { return sum_all(mul(duration_predictor(x, p, false, Rng(0)), s)); },
                                  1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}
