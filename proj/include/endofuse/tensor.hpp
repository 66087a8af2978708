#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "endofuse/errors.hpp"

namespace endofuse {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense row-major N-d array that can take part in reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies refer to the same storage, which lets the
/// tape's backward rules reach the values and gradients of the operands they
/// captured. Values produced by ops are never modified afterwards; only leaves
/// (parameters) are updated in place by the optimizer.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    impl_->value = Array::Zero(shape_size(shape));
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Array values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    if (values.size() != shape_size(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Array a(1);
    a(0) = v;
    return Tensor({1}, std::move(a), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  Index dim(std::size_t axis) const { return impl_->shape.at(axis); }
  Index size() const { return impl_->value.size(); }

  const Array& value() const { return impl_->value; }
  Array& value() { return impl_->value; }
  const Scalar* data() const { return impl_->value.data(); }
  Scalar item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return impl_->value(0);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return impl_->grad.size() == impl_->value.size(); }
  // Allocates a zero gradient on first access. Gradients belong to the shared
  // storage, so they stay writable through const handles.
  Array& grad() const {
    if (!has_grad()) impl_->grad = Array::Zero(impl_->value.size());
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.resize(0); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Deep copy with no gradient and no tape connection.
  Tensor detached_copy() const { return Tensor(shape(), value(), false); }

 private:
  struct Impl {
    Shape shape;
    Array value;
    Array grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw DimensionError("tensor rank must be in [1,4], got " + std::to_string(shape.size()));
    }
    for (Index d : shape) {
      if (d < 0) throw DimensionError("negative extent in shape " + shape_string(shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

/// Ordered record of backward rules. Ops append a rule when they produce a
/// tensor that depends on something requiring a gradient; backward() replays the
/// rules in reverse. A tape may be replayed once; reset() readies it for reuse.
template <typename Scalar>
class Tape {
 public:
  void record(std::function<void()> backward_rule) {
    if (consumed_) throw UsageError("tape already consumed by backward(); call reset() first");
    rules_.push_back(std::move(backward_rule));
  }

  void backward(Tensor<Scalar> loss) {
    if (consumed_) throw UsageError("backward() called twice without reset()");
    if (!loss.defined() || loss.size() != 1) {
      throw UsageError("backward() needs a scalar loss, got shape " +
                       (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw UsageError("loss was not produced on the tape");
    loss.grad().setOnes();
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
    consumed_ = true;
  }

  void reset() {
    rules_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return rules_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> rules_;
  bool consumed_ = false;
};

}  // namespace endofuse
