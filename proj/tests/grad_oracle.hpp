// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for scalar-valued losses.

#ifndef LSR_TESTS_GRAD_ORACLE_HPP
#define LSR_TESTS_GRAD_ORACLE_HPP

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include <torch/torch.h>

namespace lsr::testing {

/// Relative error ||g - fd|| / ||fd|| between the autograd gradient of `loss` with
/// respect to the leaf tensor `leaf` and central differences. With max_coords > 0
/// only that many randomly chosen coordinates are compared.
inline double gradient_relative_error(torch::Tensor leaf, const std::function<torch::Tensor()>& loss,
                                      int64_t max_coords = 0, double eps = 1e-6, std::uint64_t seed = 0) {
    const auto grad = torch::autograd::grad({loss()}, {leaf}, {}, false, false, true)[0];
    const auto g = grad.defined() ? grad.reshape(-1) : torch::zeros({leaf.numel()}, leaf.options());

    std::vector<int64_t> coords(leaf.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords > 0 && max_coords < leaf.numel()) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
    }
    double num = 0.0, den = 0.0;
    auto data = leaf.detach().view(-1);
    for (int64_t i : coords) {
        const double v = data[i].item<double>();
        double up, dn;
        {
            torch::NoGradGuard ng;
            data[i] = v + eps;
        }
        up = loss().item<double>();
        {
            torch::NoGradGuard ng;
            data[i] = v - eps;
        }
        dn = loss().item<double>();
        {
            torch::NoGradGuard ng;
            data[i] = v;
        }
        const double fd = (up - dn) / (2 * eps);
        const double a = g[i].item<double>();
        num += (a - fd) * (a - fd);
        den += fd * fd;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace lsr::testing

#endif  // LSR_TESTS_GRAD_ORACLE_HPP
