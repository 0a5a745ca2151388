#include "sharplens/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sharplens {

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  for (std::size_t d : dims_) {
    if (d == 0) throw ShapeError("shape extents must be positive: " + str());
  }
}

std::size_t Shape::numel() const {
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

Shape Shape::drop_front() const {
  if (dims_.empty()) throw ShapeError("cannot drop axis of a scalar shape");
  return Shape(std::vector<std::size_t>(dims_.begin() + 1, dims_.end()));
}

Shape Shape::prepend(std::size_t n) const {
  std::vector<std::size_t> d;
  d.reserve(dims_.size() + 1);
  d.push_back(n);
  d.insert(d.end(), dims_.begin(), dims_.end());
  return Shape(std::move(d));
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_.numel(), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.numel() != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

double Tensor::frobenius_norm() const { return std::sqrt(squared_norm()); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) throw ShapeError("shape mismatch " + shape_.str() + " vs " + other.shape_.str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (other.shape_ != shape_) throw ShapeError("shape mismatch " + shape_.str() + " vs " + other.shape_.str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot of tensors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("cannot stack zero tensors");
  const Shape& inner = parts.front().shape();
  std::vector<double> data;
  data.reserve(parts.size() * inner.numel());
  for (const Tensor& t : parts) {
    if (t.shape() != inner) throw ShapeError("stack: shape mismatch " + inner.str() + " vs " + t.shape().str());
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(inner.prepend(parts.size()), std::move(data));
}

Tensor unstack_one(const Tensor& batch, std::size_t i) {
  Shape inner = batch.shape().drop_front();
  const std::size_t n = inner.numel();
  if (i >= batch.shape()[0]) throw std::out_of_range("unstack index out of range");
  auto begin = batch.data().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor(std::move(inner), std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n)));
}

}  // namespace sharplens
