// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of the autodiff adjoints.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ddit/tensor.hpp"

namespace ddit {

struct KernelCheck {
    std::string kernel;
    double max_rel_error = 0.0;
    bool passed = false;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<KernelCheck> kernels;

    bool all_passed() const;
    std::vector<std::string> failures() const;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max over checked entries of |autodiff - central| / (|central| + 1e-8) for
// loss = sum(f(inputs) * w) with fixed random weights w. Inputs must be f64.
// When max_entries > 0 only that many randomly chosen entries per input are probed.
double max_gradient_error(const TensorFn& f, const std::vector<Tensor>& inputs, Rng& rng, double step = 1e-5,
                          int64_t max_entries = 0);

// Checks every primitive kernel on small random f64 shapes.
GradCheckReport grad_check_all(uint64_t seed, double tolerance = 1e-4, double step = 1e-5);

} // namespace ddit
