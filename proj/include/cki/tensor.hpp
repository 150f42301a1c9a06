#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace cki {

/// Dense row-major double tensor with value semantics. Shapes are small
/// (rank <= 4 in practice); data lives in one contiguous buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != count(shape_))
      throw std::invalid_argument("tensor data does not match shape");
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  const std::vector<int64_t>& shape() const { return shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 2-D accessors (row-major)
  double& at(int64_t r, int64_t c) { return data_[static_cast<std::size_t>(r * dim(1) + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<std::size_t>(r * dim(1) + c)]; }

  /// Same data, new shape (element count must match).
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != size()) throw std::invalid_argument("reshape: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

  std::string shape_str() const;

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace cki
