#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "latref/matrix.hpp"

// Dense kernels behind the tape. The top-level functions are OpenMP-parallel
// over output rows; every output element is accumulated in the same order as
// the serial versions in `kernels::reference`, so results do not depend on the
// thread count.
namespace latref::kernels {

Matrix transpose(const Matrix& a);

// c = a·b
Matrix matmul(const Matrix& a, const Matrix& b);
// c = a·bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// c = aᵀ·b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Row-wise layer norm: y = (x - mean) * rstd * gain + bias.
// `mean` and `rstd` (length rows) are filled when non-empty.
Matrix layer_norm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                       double eps, std::span<double> mean = {}, std::span<double> rstd = {});

// Numerically stable softmax of every row, in place.
void softmax_rows(Matrix& x);

// Work (multiply-adds) below which kernels stay on one thread.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

void set_num_threads(int n);
int num_threads();

namespace reference {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix layer_norm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                       double eps);
void softmax_rows(Matrix& x);

}  // namespace reference

// Scalar activations.
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

// GELU, tanh approximation.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace latref::kernels
