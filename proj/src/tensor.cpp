#include "binfm/nn/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace binfm::nn {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

void check2d(const Tensor& t, const char* name) {
  if (t.shape().size() != 2) raise(Errc::invalid_config, std::string(name) + " must be 2-D");
}

}  // namespace

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
  check2d(a, "a");
  check2d(b, "b");
  assert(a.dim(1) == b.dim(0));
  if (out.shape() != std::vector<int64_t>{a.dim(0), b.dim(1)}) {
    out = Tensor({a.dim(0), b.dim(1)});
  }
  CMap ma(a.data(), a.dim(0), a.dim(1));
  CMap mb(b.data(), b.dim(0), b.dim(1));
  Map mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb;
}

void matmul_bt(const Tensor& a, const Tensor& b, Tensor& out) {
  check2d(a, "a");
  check2d(b, "b");
  assert(a.dim(1) == b.dim(1));
  if (out.shape() != std::vector<int64_t>{a.dim(0), b.dim(0)}) {
    out = Tensor({a.dim(0), b.dim(0)});
  }
  CMap ma(a.data(), a.dim(0), a.dim(1));
  CMap mb(b.data(), b.dim(0), b.dim(1));
  Map mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() = ma * mb.transpose();
}

void matmul_at_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  assert(a.dim(0) == b.dim(0));
  assert(out.dim(0) == a.dim(1) && out.dim(1) == b.dim(1));
  CMap ma(a.data(), a.dim(0), a.dim(1));
  CMap mb(b.data(), b.dim(0), b.dim(1));
  Map mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() += ma.transpose() * mb;
}

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  assert(a.dim(1) == b.dim(0));
  assert(out.dim(0) == a.dim(0) && out.dim(1) == b.dim(1));
  CMap ma(a.data(), a.dim(0), a.dim(1));
  CMap mb(b.data(), b.dim(0), b.dim(1));
  Map mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() += ma * mb;
}

void matmul_bt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  assert(a.dim(1) == b.dim(1));
  assert(out.dim(0) == a.dim(0) && out.dim(1) == b.dim(0));
  CMap ma(a.data(), a.dim(0), a.dim(1));
  CMap mb(b.data(), b.dim(0), b.dim(1));
  Map mo(out.data(), out.dim(0), out.dim(1));
  mo.noalias() += ma * mb.transpose();
}

void add_inplace(Tensor& a, const Tensor& b) {
  assert(a.same_shape(b));
  double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

void init_truncated_normal(Tensor& t, Rng& rng, double stddev) {
  double* p = t.data();
  for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.truncated_normal(stddev);
}

}  // namespace binfm::nn
