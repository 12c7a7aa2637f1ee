#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "smsdc/ops.hpp"
#include "smsdc/tensor.hpp"

namespace smsdc {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` rebuilds its forward pass from the same leaf handles on every call
/// (values are perturbed in place between calls), and must be deterministic;
/// callers fix their seeds. Non-scalar outputs are reduced through a fixed
/// random positive projection so that sign errors cannot cancel.
/// Per-coordinate relative error is |a-b| / max(1e-8, |a|+|b|).
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                  double step = 1e-3) {
    for (Tensor& t : leaves) {
        if (!t.requires_grad()) {
            throw ContractError("grad_check leaf '" + t.name() + "' does not require gradients");
        }
        t.zero_grad();
    }

    Tensor out = f();
    std::mt19937_64 wrng(0x5eedc0de ^ out.size());
    std::uniform_real_distribution<double> wdist(0.25, 1.0);
    std::vector<double> w(out.size());
    for (double& x : w) x = wdist(wrng);

    const auto project = [&w](const Tensor& t) {
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * t.value()[i];
        return s;
    };

    // Analytic pass: loss = sum(w .* out).
    Tensor loss = sum_all(mul(out, Tensor::from(out.shape(), w)));
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const Tensor& t : leaves) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));
    }

    GradCheckResult result;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        std::vector<double>& v = leaves[li].mutable_value();
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double orig = v[k];
            v[k] = orig + step;
            const double lp = project(f());
            v[k] = orig - step;
            const double lm = project(f());
            v[k] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double a = analytic[li][k];
            const double err = std::abs(a - fd) / std::max(1e-8, std::abs(a) + std::abs(fd));
            result.max_rel_error = std::max(result.max_rel_error, err);
            ++result.coords_checked;
        }
    }
    return result;
}

}  // namespace smsdc
