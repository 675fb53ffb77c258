#pragma once

#include <cassert>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bijrecon::nn {

// Dense row-major double tensor. Reshape shares the underlying buffer,
// everything else copies. All shapes use int64.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<double>>(count(shape_), 0.0)) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }

  static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), 1.0); }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(std::vector<double> values, std::vector<int64_t> shape) {
    if (static_cast<int64_t>(values.size()) != count(shape))
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  bool defined() const { return static_cast<bool>(buf_); }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return defined() ? static_cast<int64_t>(buf_->size()) : 0; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int64_t i) const {
    if (i < 0) i += ndim();
    return shape_.at(static_cast<size_t>(i));
  }

  double* data() { return buf_->data(); }
  const double* data() const { return buf_->data(); }

  double& operator[](int64_t i) { return (*buf_)[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return (*buf_)[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx) { return (*buf_)[flat(idx)]; }
  double at(std::initializer_list<int64_t> idx) const { return (*buf_)[flat(idx)]; }

  // Shares the buffer; -1 infers one dimension.
  Tensor reshape(std::vector<int64_t> shape) const {
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == -1) {
        if (infer >= 0) throw std::invalid_argument("reshape: more than one -1");
        infer = static_cast<int>(i);
      } else {
        known *= shape[i];
      }
    }
    if (infer >= 0) {
      if (known == 0 || numel() % known != 0)
        throw std::invalid_argument("reshape: cannot infer dimension");
      shape[static_cast<size_t>(infer)] = numel() / known;
    }
    if (count(shape) != numel()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<double>>(*buf_);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite((*buf_)[static_cast<size_t>(i)])) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (int64_t i = 0; i < numel(); ++i) m = std::max(m, std::abs((*buf_)[static_cast<size_t>(i)]));
    return m;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

 private:
  int64_t flat(std::initializer_list<int64_t> idx) const {
    assert(static_cast<int64_t>(idx.size()) == ndim());
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }

  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<double>> buf_;
};

}  // namespace bijrecon::nn
