#include "cfmr/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace cfmr {

EditCounts edit_distance(const std::vector<int64_t>& hyp, const std::vector<int64_t>& ref) {
    const int64_t n = static_cast<int64_t>(hyp.size());
    const int64_t m = static_cast<int64_t>(ref.size());
    std::vector<int64_t> dp(static_cast<size_t>((n + 1) * (m + 1)), 0);
    auto at = [&](int64_t i, int64_t j) -> int64_t& { return dp[static_cast<size_t>(i * (m + 1) + j)]; };
    for (int64_t i = 0; i <= n; ++i) at(i, 0) = i;
    for (int64_t j = 0; j <= m; ++j) at(0, j) = j;
    for (int64_t i = 1; i <= n; ++i) {
        for (int64_t j = 1; j <= m; ++j) {
            const int64_t match = at(i - 1, j - 1) + (hyp[static_cast<size_t>(i - 1)] == ref[static_cast<size_t>(j - 1)] ? 0 : 1);
            at(i, j) = std::min({match, at(i - 1, j) + 1, at(i, j - 1) + 1});
        }
    }
    // backtrace for substitution/deletion/insertion counts
    EditCounts c;
    c.distance = at(n, m);
    int64_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 &&
            at(i, j) == at(i - 1, j - 1) + (hyp[static_cast<size_t>(i - 1)] == ref[static_cast<size_t>(j - 1)] ? 0 : 1)) {
            if (hyp[static_cast<size_t>(i - 1)] != ref[static_cast<size_t>(j - 1)]) ++c.subs;
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++c.ins;
            --i;
        } else {
            ++c.dels;
            --j;
        }
    }
    return c;
}

double sdr(const std::vector<double>& estimate, const std::vector<double>& reference) {
    if (estimate.size() != reference.size()) {
        throw DimensionError("sdr needs equal-length signals");
    }
    double ref_sq = 0.0, err_sq = 0.0;
    for (size_t i = 0; i < reference.size(); ++i) {
        ref_sq += reference[i] * reference[i];
        const double e = reference[i] - estimate[i];
        err_sq += e * e;
    }
    if (ref_sq == 0.0) throw ContractError("sdr reference is silent");
    if (err_sq == 0.0) return 99.9;
    const double db = 10.0 * std::log10(ref_sq / err_sq);
    return std::clamp(db, -99.9, 99.9);
}

double mcd_dtw(const std::vector<double>& pred, int64_t t_pred, const std::vector<double>& ref,
               int64_t t_ref, int64_t dim, bool include_c0) {
    if (dim < 1) throw ContractError("mcd_dtw needs dim >= 1");
    if (t_pred < 1 || t_ref < 1) throw ContractError("mcd_dtw needs non-empty sequences");
    const int64_t c0 = include_c0 ? 0 : 1;
    if (c0 >= dim) throw ConfigError("mcd_dtw has no coefficients left after dropping c0");

    auto local = [&](int64_t i, int64_t j) {
        double sq = 0.0;
        for (int64_t k = c0; k < dim; ++k) {
            const double d = pred[static_cast<size_t>(i * dim + k)] - ref[static_cast<size_t>(j * dim + k)];
            sq += d * d;
        }
        return std::sqrt(sq);
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> cost(static_cast<size_t>(t_pred * t_ref), inf);
    std::vector<int8_t> move(static_cast<size_t>(t_pred * t_ref), 0);  // 0 diag, 1 up (i-1), 2 left (j-1)
    auto at = [&](int64_t i, int64_t j) -> double& { return cost[static_cast<size_t>(i * t_ref + j)]; };
    at(0, 0) = local(0, 0);
    for (int64_t i = 0; i < t_pred; ++i) {
        for (int64_t j = 0; j < t_ref; ++j) {
            if (i == 0 && j == 0) continue;
            double best = inf;
            int8_t mv = 0;
            if (i > 0 && j > 0 && at(i - 1, j - 1) < best) {
                best = at(i - 1, j - 1);
                mv = 0;
            }
            if (i > 0 && at(i - 1, j) < best) {
                best = at(i - 1, j);
                mv = 1;
            }
            if (j > 0 && at(i, j - 1) < best) {
                best = at(i, j - 1);
                mv = 2;
            }
            at(i, j) = best + local(i, j);
            move[static_cast<size_t>(i * t_ref + j)] = mv;
        }
    }
    // path length via backtrace
    int64_t steps = 1;
    int64_t i = t_pred - 1, j = t_ref - 1;
    while (i > 0 || j > 0) {
        const int8_t mv = move[static_cast<size_t>(i * t_ref + j)];
        if (mv == 0) {
            --i;
            --j;
        } else if (mv == 1) {
            --i;
        } else {
            --j;
        }
        ++steps;
    }
    const double k_mcd = 10.0 * std::sqrt(2.0) / std::log(10.0);
    return k_mcd * at(t_pred - 1, t_ref - 1) / static_cast<double>(steps);
}

}  // namespace cfmr
