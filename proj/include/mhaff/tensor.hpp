#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mhaff/error.hpp"

namespace mhaff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until a gradient is accumulated.
  std::vector<double> grad;
  bool requires_grad = false;
};

// Dense row-major f64 tensor. Copies share storage (handle semantics, like the
// parameter handles of most autodiff frameworks); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  static Tensor identity(std::size_t n);
  // Builds a 2-D tensor from nested rows.
  static Tensor matrix(const std::vector<std::vector<double>>& rows);
  static Tensor vector(std::vector<double> values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> data() { return impl().data; }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double& operator[](std::size_t i) { return impl().data[i]; }
  // 2-D element access.
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool flag = true);
  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  // Gradient as a detached tensor (zeros if none accumulated).
  Tensor grad_tensor() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  bool all_finite() const;
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl>& impl_ptr() const noexcept { return impl_; }
  TensorImpl& impl();
  const TensorImpl& impl() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Bitwise comparison of shapes and data.
bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Anomaly mode: when enabled every op checks its output for NaN/Inf and throws
// NumericError naming the op.
void set_anomaly_detection(bool enabled);
bool anomaly_detection_enabled();

}  // namespace mhaff
