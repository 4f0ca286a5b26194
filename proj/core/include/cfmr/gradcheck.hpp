#pragma once

// Central finite-difference gradient verification. The forward callable must
// be deterministic (dropout in eval mode); it is invoked once per perturbed
// coordinate, so keep the leaf set small.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cfmr/ops.hpp"
#include "cfmr/tensor.hpp"

namespace cfmr {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // "name[i]" of the worst coordinate
    int64_t coords_checked = 0;

    bool ok(double tol) const { return max_rel_err < tol; }
};

// leaves: named tensors to differentiate with respect to (requires_grad is
// forced on). forward: () -> scalar Tensor, rebuilding the graph each call.
//
// Relative error uses the max(1, |analytic|, |numeric|) convention: on
// coordinates whose true gradient is (near) zero, central differences are
// pure cancellation noise and a plain ratio would amplify it meaninglessly.
template <class Real, class Fwd>
GradCheckReport grad_check(std::vector<std::pair<std::string, Tensor<Real>>> leaves, Fwd&& forward,
                           double eps, double denom_floor = 1.0) {
    for (auto& [name, t] : leaves) t.set_requires_grad(true);

    auto eval = [&]() -> Real {
        Tensor<Real> y = forward();
        if (y.numel() != 1) throw ContractError("grad_check forward must return a scalar");
        return y.values()[0];
    };

    // Determinism gate: two plain evaluations must agree bit for bit.
    const Real y1 = eval();
    const Real y2 = eval();
    if (y1 != y2) throw ContractError("grad_check forward is not deterministic");

    // Analytic gradients via one taped pass.
    std::vector<std::vector<Real>> analytic;
    {
        Tape<Real> tape;
        Tensor<Real> y = forward();
        tape.backward(y);
        for (auto& [name, t] : leaves) {
            analytic.push_back(t.has_grad() ? t.grad() : std::vector<Real>(t.values().size(), Real(0)));
        }
    }

    GradCheckReport rep;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& t = leaves[li].second;
        auto& vals = t.mutable_values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const Real saved = vals[i];
            vals[i] = saved + static_cast<Real>(eps);
            const Real fp = eval();
            vals[i] = saved - static_cast<Real>(eps);
            const Real fm = eval();
            vals[i] = saved;
            const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * eps);
            const double a = static_cast<double>(analytic[li][i]);
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), denom_floor});
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = leaves[li].first + "[" + std::to_string(i) + "]";
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        }
    }
    return rep;
}

}  // namespace cfmr
