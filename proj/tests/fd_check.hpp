#pragma once

// Central finite-difference gradient oracle. Lives in test code on purpose:
// it must stay independent of the reverse-mode path it checks. All checks
// run in 64-bit; float gradients are too noisy for step 1e-4.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "loopvlm/tensor.hpp"

namespace fd {

using loopvlm::Tensor;

struct FdReport {
    double max_rel_err = 0.0;
    int checked = 0;
    std::string worst;
    bool ok(double tol) const { return max_rel_err < tol; }
};

// Perturbs entries of `leaf` (all of them, or `sample_stride`-spaced ones for
// big tensors) and compares (f(x+h)-f(x-h))/2h against the reverse-mode grad.
inline FdReport check_grad(const std::function<double()>& f, Tensor<double>& leaf,
                           const std::vector<double>& analytic, double step = 1e-4,
                           int sample_stride = 1) {
    FdReport rep;
    auto& vals = leaf.mutable_values();
    for (size_t i = 0; i < vals.size(); i += static_cast<size_t>(sample_stride)) {
        const double keep = vals[i];
        vals[i] = keep + step;
        const double fp = f();
        vals[i] = keep - step;
        const double fm = f();
        vals[i] = keep;
        const double fd = (fp - fm) / (2.0 * step);
        const double ad = analytic[i];
        const double denom = std::max({1.0, std::fabs(fd), std::fabs(ad)});
        const double rel = std::fabs(fd - ad) / denom;
        ++rep.checked;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst = "idx " + std::to_string(i) + " fd=" + std::to_string(fd) + " ad=" + std::to_string(ad);
        }
    }
    return rep;
}

// Convenience wrapper: builds loss via `forward`, backpropagates once for the
// analytic gradient, then runs the FD sweep on each listed leaf.
inline FdReport check_all(const std::function<Tensor<double>()>& forward,
                          std::vector<Tensor<double>> leaves, double step = 1e-4,
                          int sample_stride = 1) {
    auto loss_value = [&]() { return forward().item(); };
    auto res = loopvlm::backward(forward(), /*write_leaf_grads=*/false);
    FdReport total;
    for (auto& leaf : leaves) {
        const std::vector<double>* g = res.find(leaf);
        std::vector<double> analytic(leaf.numel(), 0.0);
        if (g) analytic = *g;
        auto rep = check_grad(loss_value, leaf, analytic, step, sample_stride);
        total.checked += rep.checked;
        if (rep.max_rel_err > total.max_rel_err) {
            total.max_rel_err = rep.max_rel_err;
            total.worst = rep.worst;
        }
    }
    return total;
}

}  // namespace fd
