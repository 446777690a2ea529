#pragma once

#include <cassert>
#include <cstdint>
#include <string>
#include <vector>

#include "binfm/common.hpp"

namespace binfm::nn {

/// Dense row-major double tensor. All model math runs in 64-bit
/// precision; desk-scale runs never need reduced precision.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) n *= d;
    data_.assign(static_cast<size_t>(n), 0.0);
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  double* row(int64_t i) { return data_.data() + i * shape_[1]; }
  const double* row(int64_t i) const { return data_.data() + i * shape_[1]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// out = a @ b for 2-D tensors, shapes (m,k) x (k,n) -> (m,n).
void matmul(const Tensor& a, const Tensor& b, Tensor& out);
// out = a @ b^T, shapes (m,k) x (n,k) -> (m,n).
void matmul_bt(const Tensor& a, const Tensor& b, Tensor& out);
// out += a^T @ b, shapes (k,m) x (k,n) -> (m,n). Accumulating; used for
// weight gradients.
void matmul_at_acc(const Tensor& a, const Tensor& b, Tensor& out);
// out += a @ b (accumulating).
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out);
// out += a @ b^T (accumulating).
void matmul_bt_acc(const Tensor& a, const Tensor& b, Tensor& out);

void add_inplace(Tensor& a, const Tensor& b);

// Exact (erf-based) GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);

/// A named learnable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<int64_t> shape)
      : name(std::move(n)), value(shape), grad(shape) {}

  int64_t size() const { return value.size(); }
};

void init_truncated_normal(Tensor& t, Rng& rng, double stddev);

}  // namespace binfm::nn
