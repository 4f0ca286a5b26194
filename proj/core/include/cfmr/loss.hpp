#pragma once

// Training objectives: label-smoothed cross-entropy, CTC (forward algorithm
// in the log domain with an alpha-beta backward), the joint CTC-attention
// combination, greedy CTC decoding, phase-sensitive mask targets, the
// permutation-invariant separation loss, and the synthesis L1 + duration
// objective.

#include <complex>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cfmr/ops.hpp"
#include "cfmr/tensor.hpp"

namespace cfmr {

// Alignment cannot fit: T' < L + required separating blanks.
class CtcInfeasibleError : public Error {
public:
    using Error::Error;
};

template <class Real>
struct LossReport {
    Tensor<Real> total;
    std::map<std::string, double> terms;
    std::vector<int> chosen_perm;
    std::vector<std::pair<std::vector<int>, double>> per_perm;
};

// ---------------------------------------------------------------------------
// Cross-entropy with label smoothing. logits [B, L, V]; targets row-major
// length B*L with pad_id marking ignored positions. Mean over non-pad
// positions of (1-eps) * nll + eps * mean-nll over classes.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> cross_entropy(Tensor<Real> logits, const std::vector<int64_t>& targets, int64_t pad_id,
                           double smoothing) {
    const int64_t V = logits.dim(-1);
    const int64_t rows = logits.numel() / V;
    if (static_cast<int64_t>(targets.size()) != rows) {
        throw DimensionError("cross_entropy targets length " + std::to_string(targets.size()) +
                             " vs positions " + std::to_string(rows));
    }
    std::vector<int64_t> picks(targets.size());
    Shape mask_shape(logits.shape().begin(), logits.shape().end() - 1);
    Tensor<Real> mask = Tensor<Real>::zeros(mask_shape);
    int64_t n_valid = 0;
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] == pad_id) {
            picks[i] = 0;
        } else {
            if (targets[i] < 0 || targets[i] >= V) {
                throw ContractError("target id " + std::to_string(targets[i]) + " outside [0, " +
                                    std::to_string(V) + ")");
            }
            picks[i] = targets[i];
            mask.mutable_values()[i] = Real(1);
            ++n_valid;
        }
    }
    if (n_valid == 0) throw ContractError("cross_entropy: every position is padding");

    auto lsm = log_softmax(logits, -1);
    auto nll = neg(select_last(lsm, picks));
    auto smooth = neg(scale(sum_axis(lsm, -1), Real(1.0 / static_cast<double>(V))));
    auto per_pos = add(scale(nll, static_cast<Real>(1.0 - smoothing)), scale(smooth, static_cast<Real>(smoothing)));
    return scale(sum_all(mul(per_pos, mask)), Real(1.0 / static_cast<double>(n_valid)));
}

// ---------------------------------------------------------------------------
// CTC. Blank id is 0; data tokens t map to class t+1 in the [T, V+1]
// log-prob table. The lattice interleaves blanks into the extended label
// sequence (length 2L+1) and runs the forward recursion in the log domain.
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
Real lse2(Real a, Real b) {
    const Real ninf = -std::numeric_limits<Real>::infinity();
    if (a == ninf) return b;
    if (b == ninf) return a;
    const Real m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

inline std::vector<int64_t> ctc_extended_labels(const std::vector<int64_t>& target, int64_t classes) {
    std::vector<int64_t> ext(2 * target.size() + 1, 0);
    for (size_t i = 0; i < target.size(); ++i) {
        const int64_t id = target[i] + 1;  // shift past the blank
        if (target[i] < 0 || id >= classes) {
            throw ContractError("ctc target token " + std::to_string(target[i]) + " outside vocabulary");
        }
        ext[2 * i + 1] = id;
    }
    return ext;
}

// Minimum frame count for a feasible alignment: L plus one separating blank
// per adjacent repeated label.
inline int64_t ctc_min_frames(const std::vector<int64_t>& target) {
    int64_t repeats = 0;
    for (size_t i = 1; i < target.size(); ++i) {
        if (target[i] == target[i - 1]) ++repeats;
    }
    return static_cast<int64_t>(target.size()) + repeats;
}

template <class Real>
struct CtcLattice {
    std::vector<int64_t> ext;    // blank-interleaved labels, length 2L+1
    std::vector<Real> log_alpha; // [T, 2L+1]
    Real log_prob;
};

template <class Real>
CtcLattice<Real> ctc_lattice(const std::vector<Real>& lp, int64_t T, int64_t classes,
                             const std::vector<int64_t>& target) {
    const Real ninf = -std::numeric_limits<Real>::infinity();
    if (T < 1) throw DimensionError("ctc needs at least one frame");
    if (T < ctc_min_frames(target)) {
        throw CtcInfeasibleError("target of length " + std::to_string(target.size()) +
                                 " cannot align to " + std::to_string(T) + " frames");
    }
    CtcLattice<Real> lat;
    lat.ext = ctc_extended_labels(target, classes);
    const int64_t S = static_cast<int64_t>(lat.ext.size());
    lat.log_alpha.assign(static_cast<size_t>(T * S), ninf);

    auto a = [&](int64_t t, int64_t s) -> Real& { return lat.log_alpha[static_cast<size_t>(t * S + s)]; };
    a(0, 0) = lp[static_cast<size_t>(lat.ext[0])];
    if (S > 1) a(0, 1) = lp[static_cast<size_t>(lat.ext[1])];
    for (int64_t t = 1; t < T; ++t) {
        for (int64_t s = 0; s < S; ++s) {
            Real acc = a(t - 1, s);
            if (s >= 1) acc = detail::lse2(acc, a(t - 1, s - 1));
            if (s >= 2 && lat.ext[s] != 0 && lat.ext[s] != lat.ext[s - 2]) {
                acc = detail::lse2(acc, a(t - 1, s - 2));
            }
            a(t, s) = acc == ninf ? ninf : acc + lp[static_cast<size_t>(t * classes + lat.ext[s])];
        }
    }
    lat.log_prob = a(T - 1, S - 1);
    if (S > 1) lat.log_prob = detail::lse2(lat.log_prob, a(T - 1, S - 2));
    return lat;
}

// -log p(target | log_probs) for a single [T, classes] table, differentiable
// with respect to log_probs. The backward pass runs the beta recursion and
// accumulates the state posteriors per class.
template <class Real>
Tensor<Real> ctc_loss(Tensor<Real> log_probs, const std::vector<int64_t>& target) {
    if (log_probs.rank() != 2) {
        throw DimensionError("ctc_loss expects [T, classes], got " + shape_str(log_probs.shape()));
    }
    const int64_t T = log_probs.dim(0), C = log_probs.dim(1);
    auto lat = ctc_lattice(log_probs.values(), T, C, target);
    Tensor<Real> out = Tensor<Real>::scalar(-lat.log_prob);

    if (detail::want_grad(log_probs)) {
        out.set_requires_grad(true);
        Tape<Real>::current()->record(
            [log_probs, out, lat = std::move(lat), T, C]() mutable {
                if (!out.has_grad()) return;
                const Real g = out.grad()[0];
                const Real ninf = -std::numeric_limits<Real>::infinity();
                const int64_t S = static_cast<int64_t>(lat.ext.size());
                const auto& lp = log_probs.values();
                std::vector<Real> beta(static_cast<size_t>(T * S), ninf);
                auto b = [&](int64_t t, int64_t s) -> Real& { return beta[static_cast<size_t>(t * S + s)]; };
                b(T - 1, S - 1) = Real(0);
                if (S > 1) b(T - 1, S - 2) = Real(0);
                for (int64_t t = T - 2; t >= 0; --t) {
                    for (int64_t s = 0; s < S; ++s) {
                        Real acc = b(t + 1, s) == ninf
                                       ? ninf
                                       : b(t + 1, s) + lp[static_cast<size_t>((t + 1) * C + lat.ext[s])];
                        if (s + 1 < S && b(t + 1, s + 1) != ninf) {
                            acc = detail::lse2(acc, b(t + 1, s + 1) +
                                                        lp[static_cast<size_t>((t + 1) * C + lat.ext[s + 1])]);
                        }
                        if (s + 2 < S && lat.ext[s + 2] != 0 && lat.ext[s + 2] != lat.ext[s] &&
                            b(t + 1, s + 2) != ninf) {
                            acc = detail::lse2(acc, b(t + 1, s + 2) +
                                                        lp[static_cast<size_t>((t + 1) * C + lat.ext[s + 2])]);
                        }
                        b(t, s) = acc;
                    }
                }
                // d(-log p)/d lp[t,k] = -sum_{s: ext[s]=k} exp(alpha + beta - log p)
                auto& gx = log_probs.grad_buffer();
                for (int64_t t = 0; t < T; ++t) {
                    for (int64_t s = 0; s < S; ++s) {
                        const Real al = lat.log_alpha[static_cast<size_t>(t * S + s)];
                        const Real be = beta[static_cast<size_t>(t * S + s)];
                        if (al == ninf || be == ninf) continue;
                        gx[static_cast<size_t>(t * C + lat.ext[s])] -= g * std::exp(al + be - lat.log_prob);
                    }
                }
            },
            {log_probs, out});
    }
    check_finite(out.values(), "ctc_loss");
    return out;
}

// Mean CTC loss over a padded batch: log_probs [B, T, classes] with
// per-sample frame counts and target sequences.
template <class Real>
Tensor<Real> ctc_loss_batch(Tensor<Real> log_probs, const std::vector<int64_t>& lengths,
                            const std::vector<std::vector<int64_t>>& targets) {
    const int64_t B = log_probs.dim(0);
    if (static_cast<int64_t>(lengths.size()) != B || static_cast<int64_t>(targets.size()) != B) {
        throw DimensionError("ctc_loss_batch: lengths/targets must match batch");
    }
    Tensor<Real> total;
    for (int64_t b = 0; b < B; ++b) {
        auto slice = reshape(narrow(narrow(log_probs, 0, b, 1), 1, 0, lengths[static_cast<size_t>(b)]),
                             {lengths[static_cast<size_t>(b)], log_probs.dim(2)});
        auto one = ctc_loss(slice, targets[static_cast<size_t>(b)]);
        total = total.defined() ? add(total, one) : one;
    }
    return scale(total, Real(1.0 / static_cast<double>(B)));
}

// ---------------------------------------------------------------------------
// Joint CTC-attention: lambda * ctc + (1 - lambda) * ce.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> joint_loss(Tensor<Real> ce, Tensor<Real> ctc, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("joint weight must be in [0, 1]");
    return add(scale(ctc, static_cast<Real>(lambda)), scale(ce, static_cast<Real>(1.0 - lambda)));
}

// ---------------------------------------------------------------------------
// Greedy CTC decoding: frame-wise argmax, collapse consecutive repeats, drop
// blanks; class k maps back to data token k-1.
// ---------------------------------------------------------------------------

template <class Real>
std::vector<int64_t> ctc_greedy_decode(const Tensor<Real>& log_probs) {
    if (log_probs.rank() != 2) throw DimensionError("ctc_greedy_decode expects [T, classes]");
    const int64_t T = log_probs.dim(0), C = log_probs.dim(1);
    std::vector<int64_t> out;
    int64_t prev = -1;
    for (int64_t t = 0; t < T; ++t) {
        int64_t best = 0;
        for (int64_t k = 1; k < C; ++k) {
            if (log_probs.values()[t * C + k] > log_probs.values()[t * C + best]) best = k;
        }
        if (best != prev && best != 0) out.push_back(best - 1);
        prev = best;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Phase-sensitive mask targets: m_s = |s| cos(theta_s - theta_mix) / |mix| =
// Re(s conj(mix)) / |mix|^2, clamped to [0, clamp_max]; zero-magnitude mixture
// bins get mask 0.
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> psm_target(const std::vector<std::vector<std::complex<double>>>& sources,
                        const std::vector<std::complex<double>>& mix, int64_t T, int64_t F,
                        double clamp_max = 1.0) {
    const int64_t S = static_cast<int64_t>(sources.size());
    if (static_cast<int64_t>(mix.size()) != T * F) throw DimensionError("psm_target mix size mismatch");
    Tensor<Real> out = Tensor<Real>::zeros({S, T, F});
    auto& ov = out.mutable_values();
    for (int64_t s = 0; s < S; ++s) {
        if (static_cast<int64_t>(sources[static_cast<size_t>(s)].size()) != T * F) {
            throw DimensionError("psm_target source size mismatch");
        }
        for (int64_t i = 0; i < T * F; ++i) {
            const double denom = std::norm(mix[static_cast<size_t>(i)]);
            double m = 0.0;
            if (denom > 0.0) {
                m = (sources[static_cast<size_t>(s)][static_cast<size_t>(i)] * std::conj(mix[static_cast<size_t>(i)])).real() / denom;
            }
            ov[s * T * F + i] = static_cast<Real>(std::clamp(m, 0.0, clamp_max));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Utterance-level permutation-invariant loss. For each permutation pi of the
// S speakers, the mean squared error between masks_pi applied to the mixture
// magnitude and the mask targets applied likewise; the total is the minimum
// over pi (ties broken by the lexicographically first permutation). Gradient
// flows through the chosen permutation only.
// ---------------------------------------------------------------------------

template <class Real>
LossReport<Real> upit_loss(Tensor<Real> masks, Tensor<Real> mix_mag, Tensor<Real> psm_targets,
                           int64_t max_speakers = 4) {
    if (masks.rank() != 3 || psm_targets.rank() != 3) {
        throw DimensionError("upit_loss expects [S, T, F] masks and targets");
    }
    const int64_t S = masks.dim(0), T = masks.dim(1), F = masks.dim(2);
    if (S > max_speakers) {
        throw ConfigError("speaker count " + std::to_string(S) + " exceeds the permutation-search limit " +
                          std::to_string(max_speakers));
    }
    if (psm_targets.dim(0) != S || psm_targets.dim(1) != T || psm_targets.dim(2) != F ||
        mix_mag.numel() != T * F) {
        throw DimensionError("upit_loss shape mismatch");
    }
    auto mix = reshape(mix_mag, {T, F});

    // pairwise mean-squared errors between masked magnitudes
    std::vector<std::vector<Tensor<Real>>> pair(static_cast<size_t>(S),
                                                std::vector<Tensor<Real>>(static_cast<size_t>(S)));
    for (int64_t i = 0; i < S; ++i) {
        auto est = mul(reshape(narrow(masks, 0, i, 1), {T, F}), mix);
        for (int64_t j = 0; j < S; ++j) {
            auto ref = mul(reshape(narrow(psm_targets, 0, j, 1), {T, F}), mix);
            auto diff = sub(est, ref);
            pair[static_cast<size_t>(i)][static_cast<size_t>(j)] = mean_all(mul(diff, diff));
        }
    }

    std::vector<int> perm(static_cast<size_t>(S));
    for (int64_t i = 0; i < S; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);

    LossReport<Real> report;
    Tensor<Real> best;
    double best_value = std::numeric_limits<double>::infinity();
    do {
        // accumulate in target order so the total is bit-identical under any
        // permutation of the estimate channels
        std::vector<int> inv(static_cast<size_t>(S));
        for (int64_t i = 0; i < S; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = static_cast<int>(i);
        Tensor<Real> acc;
        for (int64_t j = 0; j < S; ++j) {
            const auto& term = pair[static_cast<size_t>(inv[static_cast<size_t>(j)])][static_cast<size_t>(j)];
            acc = acc.defined() ? add(acc, term) : term;
        }
        auto value = scale(acc, Real(1.0 / static_cast<double>(S)));
        const double v = static_cast<double>(value.item());
        report.per_perm.emplace_back(perm, v);
        if (v < best_value) {
            best_value = v;
            best = value;
            report.chosen_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    report.total = best;
    report.terms["upit"] = best_value;
    return report;
}

// ---------------------------------------------------------------------------
// Synthesis loss: masked mean L1 on features plus weighted MSE between the
// predicted log-durations and log of the target durations.
// ---------------------------------------------------------------------------

template <class Real>
LossReport<Real> tts_loss(Tensor<Real> feats_pred, Tensor<Real> feats_target,
                          const std::vector<int64_t>& frame_lengths, Tensor<Real> dur_pred_log,
                          const std::vector<std::vector<int64_t>>& dur_target,
                          const std::vector<int64_t>& token_lengths, double dur_weight) {
    if (feats_pred.shape() != feats_target.shape()) {
        throw DimensionError("tts_loss feature shapes differ: " + shape_str(feats_pred.shape()) + " vs " +
                             shape_str(feats_target.shape()));
    }
    const int64_t B = feats_pred.dim(0), T = feats_pred.dim(1), D = feats_pred.dim(2);
    const int64_t L = dur_pred_log.dim(1);

    auto fmask = frame_mask<Real>(frame_lengths, T);  // [B, T, 1]
    int64_t n_frames = 0;
    for (int64_t l : frame_lengths) n_frames += l;
    if (n_frames == 0) throw ContractError("tts_loss: no valid frames");
    auto l1 = scale(sum_all(mul(abs_op(sub(feats_pred, feats_target)), fmask)),
                    Real(1.0 / static_cast<double>(n_frames * D)));

    Tensor<Real> log_dur = Tensor<Real>::zeros({B, L});
    Tensor<Real> tmask = Tensor<Real>::zeros({B, L});
    int64_t n_tokens = 0;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t lb = token_lengths[static_cast<size_t>(b)];
        for (int64_t i = 0; i < lb; ++i) {
            const int64_t d = dur_target[static_cast<size_t>(b)][static_cast<size_t>(i)];
            if (d < 1) throw ContractError("duration targets must be >= 1 for the log-domain loss");
            log_dur.mutable_values()[b * L + i] = static_cast<Real>(std::log(static_cast<double>(d)));
            tmask.mutable_values()[b * L + i] = Real(1);
            ++n_tokens;
        }
    }
    auto ddiff = sub(dur_pred_log, log_dur);
    auto dur_mse = scale(sum_all(mul(mul(ddiff, ddiff), tmask)), Real(1.0 / static_cast<double>(n_tokens)));

    LossReport<Real> report;
    report.total = add(l1, scale(dur_mse, static_cast<Real>(dur_weight)));
    report.terms["l1"] = static_cast<double>(l1.item());
    report.terms["dur_mse"] = static_cast<double>(dur_mse.item());
    return report;
}

}  // namespace cfmr
