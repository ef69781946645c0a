#pragma once

// Stochastic recurrence depth: Poisson with a log-normal rate whose mean is
// pinned to r_bar + 1 by the -sigma^2/2 correction, clamped to [1, r_max].

#include <algorithm>
#include <cmath>

#include "loopvlm/errors.hpp"
#include "loopvlm/rng.hpp"

namespace loopvlm {

struct DepthSample {
    int r = 1;
    int n_no_grad = 0;
    int n_grad = 1;
};

struct DepthDistribution {
    double r_bar = 8;
    double sigma_lambda = 0.5;
    int r_max = 32;
};

inline DepthSample sample_depth(const DepthDistribution& dist, int k_grad, Rng& rng) {
    if (dist.r_bar < 1) throw NumericError("sample_depth: r_bar must be >= 1");
    const double mean = dist.r_bar + 1.0;
    const double s = dist.sigma_lambda;
    const double z = rng.normal();
    const double lambda = std::exp(std::log(mean) - 0.5 * s * s + s * z);
    DepthSample d;
    d.r = std::clamp(rng.poisson(lambda), 1, dist.r_max);
    d.n_grad = std::min(d.r, k_grad);
    d.n_no_grad = d.r - d.n_grad;
    return d;
}

inline DepthSample fixed_depth(int r, int k_grad) {
    DepthSample d;
    d.r = r;
    d.n_grad = std::min(r, k_grad);
    d.n_no_grad = r - d.n_grad;
    return d;
}

}  // namespace loopvlm
