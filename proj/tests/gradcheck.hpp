#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "longiseg/tensor.hpp"

namespace testutil {

/// Central-difference gradient check. `build` reruns the forward pass from
/// the given leaf parameters to a scalar loss; the analytic gradients from
/// one backward pass are compared against (f(x+eps) - f(x-eps)) / 2eps for
/// every element of every parameter. Returns the worst relative error
/// (absolute-floored at 1 so near-zero gradients compare absolutely).
inline double max_grad_rel_err(const std::vector<longiseg::TensorD>& params,
                               const std::function<longiseg::TensorD()>& build,
                               double eps = 1e-4) {
    using longiseg::NoGradGuard;
    using longiseg::TensorD;

    // Gradients accumulate across backward passes by design; start clean so a
    // parameter reused by an earlier check does not pollute this one.
    for (const auto& p : params)
        const_cast<TensorD&>(p).zero_grad();

    TensorD loss = build();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params)
        analytic.push_back(p.grad());

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = const_cast<TensorD&>(params[pi]).data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            double lp, lm;
            {
                NoGradGuard ng;
                data[i] = saved + eps;
                lp = build().item();
                data[i] = saved - eps;
                lm = build().item();
            }
            data[i] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double err = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

/// Same check restricted to k random elements per parameter tensor, for
/// graphs too expensive to probe exhaustively. Every tensor is still
/// covered; only the per-element sweep is subsampled.
inline double max_grad_rel_err_sampled(const std::vector<longiseg::TensorD>& params,
                                       const std::function<longiseg::TensorD()>& build,
                                       std::size_t k_per_tensor, std::uint64_t seed,
                                       double eps = 1e-4) {
    using longiseg::NoGradGuard;
    using longiseg::TensorD;

    for (const auto& p : params)
        const_cast<TensorD&>(p).zero_grad();
    TensorD loss = build();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params)
        analytic.push_back(p.grad());

    std::mt19937_64 g(seed);
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = const_cast<TensorD&>(params[pi]).data();
        std::vector<std::size_t> picks(data.size());
        for (std::size_t i = 0; i < picks.size(); ++i)
            picks[i] = i;
        std::shuffle(picks.begin(), picks.end(), g);
        picks.resize(std::min(k_per_tensor, picks.size()));
        for (const std::size_t i : picks) {
            const double saved = data[i];
            double lp, lm;
            {
                NoGradGuard ng;
                data[i] = saved + eps;
                lp = build().item();
                data[i] = saved - eps;
                lm = build().item();
            }
            data[i] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double err = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace testutil
