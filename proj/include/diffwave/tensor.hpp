#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "diffwave/error.hpp"

namespace diffwave {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array that owns its storage.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_size(shape_),
            "tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_str(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> span() noexcept { return data_; }
  std::span<const Real> span() const noexcept { return data_; }
  std::vector<Real>& vec() noexcept { return data_; }
  const std::vector<Real>& vec() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }

  Real& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  Real at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  Real& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Real at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Same data, new shape of equal size.
  Tensor reshaped(Shape s) const& {
    require(shape_size(s) == size(), "reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }
  Tensor reshaped(Shape s) && {
    require(shape_size(s) == size(), "reshape: " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), std::move(data_));
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  void check_same(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_)
      fail(ErrorKind::Config,
           std::string("tensor ") + op + ": shape " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

}  // namespace diffwave
