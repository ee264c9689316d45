// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers. The finite-difference oracle lives here, on purpose
// outside the library, so gradient checks stay independent of the tape.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "proxykv/rng.hpp"
#include "proxykv/tensor.hpp"

namespace pkvtest {

inline proxykv::Tensor random_tensor(proxykv::Shape shape,
                                     proxykv::Rng& rng,
                                     double lo = -1.0,
                                     double hi = 1.0,
                                     bool requires_grad = false) {
    std::vector<double> data(static_cast<size_t>(proxykv::shape_numel(shape)));
    for (auto& v : data) {
        v = rng.uniform(lo, hi);
    }
    return proxykv::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

inline bool approx(double a, double b, double tol = 1e-12) {
    return std::abs(a - b) <= tol;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;  // "<leaf>[i]" of the worst element
};

// Central finite differences against the tape gradients. `build` must
// reconstruct the scalar loss from the current leaf values on every call.
inline GradCheckReport gradcheck(const std::function<proxykv::Tensor()>& build,
                                 std::vector<std::pair<std::string, proxykv::Tensor>> leaves,
                                 double h = 1e-5) {
    using proxykv::Tensor;
    for (auto& [name, leaf] : leaves) {
        leaf.zero_grad();
    }
    Tensor loss = build();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& [name, leaf] : leaves) {
        analytic.push_back(leaf.grad());
    }

    GradCheckReport report;
    for (size_t l = 0; l < leaves.size(); ++l) {
        auto& leaf = leaves[l].second;
        const bool had_grad = leaf.requires_grad();
        leaf.set_requires_grad(false);  // value-only rebuilds, no tape
        for (size_t i = 0; i < leaf.raw_data().size(); ++i) {
            const double saved = leaf.raw_data()[i];
            leaf.raw_data()[i] = saved + h;
            const double fp = build().item();
            leaf.raw_data()[i] = saved - h;
            const double fm = build().item();
            leaf.raw_data()[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[l][i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1.0});
            const double rel = std::abs(a - fd) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = leaves[l].first + "[" + std::to_string(i) + "]";
            }
        }
        leaf.set_requires_grad(had_grad);
    }
    return report;
}

}  // namespace pkvtest
