// SPDX-License-Identifier: Apache-2.0
#include "scob/tensor.hpp"

#include <cmath>
#include <sstream>

#include "scob/error.hpp"

namespace scob {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("shape extents must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real fill, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real v, bool requires_grad) { return from({1}, {v}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }
std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw BoundsError("axis out of range");
  return impl_->shape[axis];
}
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->value.size()); }
std::span<const Real> Tensor::values() const { return impl_->value; }

std::span<Real> Tensor::mutable_values() {
  if (!impl_->is_leaf) throw ContractError("values of a recorded interior tensor are read-only");
  return impl_->value;
}

Real Tensor::item() const {
  if (impl_->value.size() != 1) throw ContractError("item() requires a single-element tensor");
  return impl_->value[0];
}

Real Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = impl_->shape;
  if (index.size() != s.size()) throw DimensionError("index rank mismatch");
  std::int64_t off = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= s[k]) throw BoundsError("tensor index out of range");
    off = off * s[k] + i;
    ++k;
  }
  return impl_->value[static_cast<std::size_t>(off)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_->is_leaf) throw ContractError("requires_grad can only be toggled on leaves");
  impl_->requires_grad = flag;
}

void Tensor::retain_grad() { impl_->retain_grad = true; }
bool Tensor::is_leaf() const { return impl_->is_leaf; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const Real> Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<Real> Tensor::mutable_grad() { return grad_buffer(*impl_); }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
  return from(impl_->shape, impl_->value, requires_grad);
}

std::vector<Real>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.value.size(), Real(0));
  return t.grad;
}

void accumulate_grad(TensorImpl& t, std::span<const Real> delta) {
  auto& g = grad_buffer(t);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void Tape::push(Record record) {
  if (consumed_) throw ContractError("tape already consumed by backward");
  records_.push_back(std::move(record));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice on one tape");
  if (!loss.defined() || loss.numel() != 1) throw ContractError("backward requires a scalar loss");
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any requires_grad tensor");
  consumed_ = true;
  auto& g = grad_buffer(*loss.impl());
  g[0] += Real(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  for (auto& rec : records_) {
    auto& out = *rec.output;
    if (!out.retain_grad && !out.is_leaf) {
      out.grad.clear();
      out.grad.shrink_to_fit();
    }
  }
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace scob
