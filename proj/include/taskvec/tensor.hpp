#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "taskvec/rng.hpp"

namespace taskvec {

using Shape = std::vector<std::int64_t>;

// Raised when operand shapes do not conform.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised when a computation produces NaN/Inf or otherwise leaves the
// representable domain.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit floats. Plain value type: copy copies.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor randn(Shape shape, RngStream& rng);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::int64_t dim(int i) const { return shape_.at(i); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  bool is_scalar() const { return numel() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[i]; }
  double operator[](std::int64_t i) const { return data_[i]; }
  // 2-D accessors; caller guarantees ndim() == 2.
  double& at(std::int64_t r, std::int64_t c) { return data_[r * shape_[1] + c]; }
  double at(std::int64_t r, std::int64_t c) const { return data_[r * shape_[1] + c]; }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace taskvec
