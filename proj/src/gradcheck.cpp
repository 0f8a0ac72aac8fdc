// SPDX-License-Identifier: Apache-2.0
#include "scob/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "scob/error.hpp"

namespace scob {

namespace {

Real eval_detached(const ScalarFn& f, const std::vector<Real>& point, const Shape& shape) {
  NoGradScope guard;
  Tensor y = f(Tensor::from(shape, point));
  if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
  return y.item();
}

}  // namespace

std::vector<Real> numeric_gradient(const ScalarFn& f, const Tensor& x, Real eps) {
  std::vector<Real> point(x.values().begin(), x.values().end());
  std::vector<Real> g(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Real orig = point[i];
    point[i] = orig + eps;
    const Real fp = eval_detached(f, point, x.shape());
    point[i] = orig - eps;
    const Real fm = eval_detached(f, point, x.shape());
    point[i] = orig;
    g[i] = (fp - fm) / (Real(2) * eps);
  }
  return g;
}

Real finite_diff_check(const ScalarFn& f, const Tensor& x, Real eps) {
  if (!(eps > 0) || eps > Real(1e-3)) throw ContractError("finite_diff_check: eps must lie in (0, 1e-3]");
  std::vector<Real> point(x.values().begin(), x.values().end());
  const Real y1 = eval_detached(f, point, x.shape());
  const Real y2 = eval_detached(f, point, x.shape());
  if (!(y1 == y2)) throw OracleError("finite_diff_check: function is not deterministic");

  Tensor leaf = x.clone(true);
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = f(leaf);
  }
  if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
  std::vector<Real> analytic(point.size(), Real(0));
  if (y.requires_grad()) {
    tape.backward(y);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  }
  const auto numeric = numeric_gradient(f, x, eps);
  Real worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const Real err = std::abs(analytic[i] - numeric[i]) / std::max(Real(1), std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace scob
