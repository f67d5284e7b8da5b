#pragma once

// Dense row-major float64 tensor. The one numeric container everything else
// (autodiff graph, model parameters, energy-model oracles) is built on.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedcd {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) {
    if (d == 0) throw std::invalid_argument("tensor: zero dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

class Tensor {
 public:
  // Default state is the empty placeholder (no shape, no data).
  Tensor() = default;

  // Leaf construction: validates shape/data agreement and finiteness.
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " needs " +
                                  std::to_string(shape_numel(shape_)) + " elements, got " +
                                  std::to_string(data_.size()));
    for (double v : data_)
      if (!std::isfinite(v)) throw std::invalid_argument("tensor: non-finite element at construction");
  }

  // Internal factory for computed values; skips the finiteness check so that
  // overflow in intermediate nodes surfaces as a non-finite loss, not a throw.
  static Tensor raw(Shape shape, std::vector<double> data) {
    Tensor t;
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: raw shape/data mismatch " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_numel(shape);
    return raw(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // True scalar in the graph sense: a single element.
  bool is_scalar() const { return data_.size() == 1; }
  double item() const {
    if (!is_scalar()) throw std::logic_error("tensor: item() on non-scalar " + shape_str(shape_));
    return data_[0];
  }

 private:
  Shape shape_{};
  std::vector<double> data_{};
};

inline double l2_distance(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("tensor: l2_distance shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace fedcd
