#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pidm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an operation receives operands of incompatible shape.
/// The message names the op and both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b);
  ShapeError(std::string_view op, const std::string& what);
};

/// Raised when a forward or backward computation produces NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string_view op, std::size_t node, std::string_view phase);

  std::size_t node() const noexcept { return node_; }
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
  std::size_t node_;
};

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j);
  double operator()(std::size_t i, std::size_t j) const;
  double& operator()(std::size_t i, std::size_t j, std::size_t k);
  double operator()(std::size_t i, std::size_t j, std::size_t k) const;

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;
  void fill(double value) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace pidm
