// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "scob/tensor.hpp"

namespace scob {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares reverse-mode gradients of `f` at `x` against central differences.
/// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
/// Throws OracleError when two evaluations at the same point differ.
Real finite_diff_check(const ScalarFn& f, const Tensor& x, Real eps = 1e-5);

/// Central-difference gradient of `f` at `x`; evaluation runs detached.
std::vector<Real> numeric_gradient(const ScalarFn& f, const Tensor& x, Real eps);

}  // namespace scob
