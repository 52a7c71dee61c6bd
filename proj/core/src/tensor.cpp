#include "pidm/tensor.hpp"

#include <cmath>
#include <sstream>

namespace pidm {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

ShapeError::ShapeError(std::string_view op, const Shape& a, const Shape& b)
    : std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                            shape_str(b)) {}

ShapeError::ShapeError(std::string_view op, const std::string& what)
    : std::invalid_argument(std::string(op) + ": " + what) {}

NumericError::NumericError(std::string_view op, std::size_t node, std::string_view phase)
    : std::runtime_error("non-finite value in " + std::string(phase) + " of op '" +
                         std::string(op) + "' at node " + std::to_string(node)),
      op_(op),
      node_(node) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("Tensor", "shape " + shape_str(shape_) + " does not match " +
                                   std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

double& Tensor::operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

double Tensor::operator()(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}

double& Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item", "expected a single element, got shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) throw ShapeError("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double value) noexcept {
  for (double& v : data_) v = value;
}

}  // namespace pidm
