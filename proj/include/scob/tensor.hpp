// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace scob {

#ifdef SCOB_USE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  bool retain_grad = false;
  bool is_leaf = true;
};

/// Shared handle to a dense row-major array. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;

  std::span<const Real> values() const;
  /// Mutable access is reserved for leaves (parameters, inputs).
  std::span<Real> mutable_values();
  Real item() const;
  Real at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  /// Keep the gradient of an interior tensor after backward.
  void retain_grad();
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of primitive applications. Ops append to the tape that is
/// active on the current thread; with no active tape they run detached.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Record {
    const char* primitive;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void push(Record record);
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a scalar loss. Leaves and retain-grad tensors keep
  /// their accumulated gradient; other interior gradients are released.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<Record> records_;
  bool consumed_ = false;
};

/// Makes a tape active for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for the lifetime of the scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Accumulates `delta` into the gradient buffer of `t`, allocating it if needed.
void accumulate_grad(TensorImpl& t, std::span<const Real> delta);
std::vector<Real>& grad_buffer(TensorImpl& t);

}  // namespace scob
