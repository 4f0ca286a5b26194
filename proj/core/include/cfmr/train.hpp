#pragma once

// Optimization machinery: bias-corrected Adam, the warmup and one-cycle
// learning-rate schedules, global gradient-norm clipping, SpecAugment, and
// checkpoint selection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfmr/model.hpp"
#include "cfmr/ops.hpp"

namespace cfmr {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class Real>
struct AdamState {
    std::vector<std::vector<Real>> m, v;  // aligned with store order; empty for non-trainable
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double weight_decay = 0.0;
};

template <class Real>
AdamState<Real> init_adam(const ParamStore<Real>& store, double beta1 = 0.9, double beta2 = 0.98,
                          double eps = 1e-9, double weight_decay = 0.0) {
    AdamState<Real> st;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = eps;
    st.weight_decay = weight_decay;
    st.m.resize(store.size());
    st.v.resize(store.size());
    for (size_t i = 0; i < store.size(); ++i) {
        if (store.tensor(i).requires_grad()) {
            st.m[i].assign(store.tensor(i).values().size(), Real(0));
            st.v[i].assign(store.tensor(i).values().size(), Real(0));
        }
    }
    return st;
}

// One bias-corrected update over every trainable tensor; a tensor with no
// populated gradient contributes zero gradient (its moments still decay).
template <class Real>
void adam_step(ParamStore<Real>& store, AdamState<Real>& st, double lr) {
    if (st.m.size() != store.size()) throw ContractError("optimizer state does not match the store");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < store.size(); ++i) {
        auto& t = store.tensor(i);
        if (!t.requires_grad()) continue;
        auto& vals = t.mutable_values();
        const bool has_g = t.has_grad();
        const std::vector<Real>* g = has_g ? &t.grad() : nullptr;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (size_t k = 0; k < vals.size(); ++k) {
            double gk = has_g ? static_cast<double>((*g)[k]) : 0.0;
            if (st.weight_decay != 0.0) gk += st.weight_decay * static_cast<double>(vals[k]);
            const double mk = st.beta1 * static_cast<double>(m[k]) + (1.0 - st.beta1) * gk;
            const double vk = st.beta2 * static_cast<double>(v[k]) + (1.0 - st.beta2) * gk * gk;
            m[k] = static_cast<Real>(mk);
            v[k] = static_cast<Real>(vk);
            const double mhat = mk / bc1;
            const double vhat = vk / bc2;
            vals[k] = static_cast<Real>(static_cast<double>(vals[k]) - lr * mhat / (std::sqrt(vhat) + st.eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

// coefficient * d_att^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks exactly
// at step == warmup.
inline double noam_lr(int64_t step, int64_t d_att, int64_t warmup, double coefficient) {
    if (step < 1) throw ContractError("noam_lr needs step >= 1");
    if (warmup < 1) throw ConfigError("warmup must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return coefficient / std::sqrt(static_cast<double>(d_att)) *
           std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

struct OneCycleConfig {
    double pct_ramp = 0.3;
    double final_div = 1e4;
};

// Linear ramp 0 -> max_lr over the first pct_ramp of steps, then cosine
// anneal down to max_lr / final_div at step == total.
inline double onecycle_lr(int64_t step, int64_t total, double max_lr, OneCycleConfig cfg = {}) {
    if (step < 1 || step > total) throw ContractError("onecycle_lr needs 1 <= step <= total");
    const int64_t ramp = std::max<int64_t>(1, static_cast<int64_t>(std::llround(cfg.pct_ramp * static_cast<double>(total))));
    if (ramp >= total) throw ConfigError("onecycle ramp covers the whole run; lower pct_ramp");
    if (step <= ramp) {
        return max_lr * static_cast<double>(step) / static_cast<double>(ramp);
    }
    const double end = max_lr / cfg.final_div;
    const double t = static_cast<double>(step - ramp) / static_cast<double>(total - ramp);
    return end + (max_lr - end) * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct SchedulerConfig {
    enum class Kind { noam, onecycle };
    Kind kind = Kind::noam;
    double lr_coefficient = 1.0;  // conventional values: 1, 2, 5, 10
    int64_t warmup = 4000;
    int64_t total = 0;  // onecycle only
    int64_t d_att = 256;
    double max_lr = 1e-3;  // onecycle only
    OneCycleConfig onecycle;
};

inline double scheduler_lr(const SchedulerConfig& cfg, int64_t step) {
    switch (cfg.kind) {
        case SchedulerConfig::Kind::noam:
            return noam_lr(step, cfg.d_att, cfg.warmup, cfg.lr_coefficient);
        case SchedulerConfig::Kind::onecycle:
            return onecycle_lr(step, cfg.total, cfg.max_lr, cfg.onecycle);
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// Gradient clipping: if the global L2 norm over all trainable gradients
// exceeds max_norm, scale every gradient by max_norm / norm. Returns the
// scale applied (1 when no clipping happened).
// ---------------------------------------------------------------------------

template <class Real>
double clip_grad_norm(ParamStore<Real>& store, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("max_norm must be positive");
    double sq = 0.0;
    for (size_t i = 0; i < store.size(); ++i) {
        auto& t = store.tensor(i);
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (const Real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (size_t i = 0; i < store.size(); ++i) {
        auto& t = store.tensor(i);
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (Real& g : t.grad_buffer()) g = static_cast<Real>(static_cast<double>(g) * scale);
    }
    return scale;
}

template <class Real>
double grad_norm(const ParamStore<Real>& store) {
    double sq = 0.0;
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& t = store.tensor(i);
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (const Real g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// SpecAugment: zero out n_time time bands of exactly time_width frames and
// n_freq frequency bands of exactly freq_width bins, band starts drawn per
// sample from the rng. Fill value 0 (features are assumed mean-normalized).
// ---------------------------------------------------------------------------

struct SpecAugmentConfig {
    int64_t n_time_masks = 0;
    int64_t time_width = 0;
    int64_t n_freq_masks = 0;
    int64_t freq_width = 0;
};

template <class Real>
Tensor<Real> spec_augment(Tensor<Real> feats, const SpecAugmentConfig& cfg, const Rng& rng) {
    if (feats.rank() != 3) throw DimensionError("spec_augment expects [B, T, F]");
    const int64_t B = feats.dim(0), T = feats.dim(1), F = feats.dim(2);
    if (cfg.time_width >= T || cfg.freq_width >= F) {
        throw ConfigError("spec_augment mask widths must be smaller than the tensor extents");
    }
    if ((cfg.n_time_masks == 0 || cfg.time_width == 0) && (cfg.n_freq_masks == 0 || cfg.freq_width == 0)) {
        return feats;
    }
    Tensor<Real> keep = Tensor<Real>::full({B, T, F}, Real(1));
    auto& kv = keep.mutable_values();
    for (int64_t b = 0; b < B; ++b) {
        const Rng rb = rng.child(static_cast<uint64_t>(b));
        for (int64_t m = 0; m < cfg.n_time_masks; ++m) {
            const int64_t start = rb.below(static_cast<uint64_t>(2 * m), T - cfg.time_width + 1);
            for (int64_t t = start; t < start + cfg.time_width; ++t) {
                for (int64_t f = 0; f < F; ++f) kv[(b * T + t) * F + f] = Real(0);
            }
        }
        for (int64_t m = 0; m < cfg.n_freq_masks; ++m) {
            const int64_t start = rb.below(static_cast<uint64_t>(2 * m + 1) * 7919, F - cfg.freq_width + 1);
            for (int64_t f = start; f < start + cfg.freq_width; ++f) {
                for (int64_t t = 0; t < T; ++t) kv[(b * T + t) * F + f] = Real(0);
            }
        }
    }
    return mul(feats, keep);
}

// ---------------------------------------------------------------------------
// Checkpoint selection: the n entries with the smallest metric (lower is
// better); ties prefer the later step. Returned best-first.
// ---------------------------------------------------------------------------

inline std::vector<int64_t> select_n_best(std::vector<std::pair<int64_t, double>> history, int64_t n) {
    std::stable_sort(history.begin(), history.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second < b.second;
        return a.first > b.first;
    });
    std::vector<int64_t> steps;
    for (const auto& [step, metric] : history) {
        if (static_cast<int64_t>(steps.size()) >= n) break;
        steps.push_back(step);
    }
    return steps;
}

}  // namespace cfmr
