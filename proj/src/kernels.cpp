#include "latref/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "latref/errors.hpp"

namespace latref::kernels {

namespace {

void check_inner(std::size_t a_cols, std::size_t b_rows, const char* op) {
  if (a_cols != b_rows) {
    throw ShapeError(std::string(op) + ": inner dimensions differ (" + std::to_string(a_cols) +
                     " vs " + std::to_string(b_rows) + ")");
  }
}

void check_affine(const Matrix& x, std::span<const double> gain, std::span<const double> bias) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(x.cols()));
  }
}

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < a.rows(); i0 += kTile) {
    for (std::size_t j0 = 0; j0 < a.cols(); j0 += kTile) {
      const std::size_t i1 = std::min(i0 + kTile, a.rows());
      const std::size_t j1 = std::min(j0 + kTile, a.cols());
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
    }
  }
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.cols();
  Matrix c(n, m);
  if (n == 0 || m == 0 || k == 0) return c;

  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();

  // Four output rows share each streamed row of B; k and j are tiled so the
  // active block of B stays cache-resident. Per element, products are still
  // summed in ascending k.
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kDepth = 128;
  constexpr std::size_t kCols = 256;
  const long row_blocks = static_cast<long>((n + kRows - 1) / kRows);
  const bool parallel = n * k * m >= kParallelThreshold;

#pragma omp parallel for schedule(static) if (parallel)
  for (long rb = 0; rb < row_blocks; ++rb) {
    const std::size_t i0 = static_cast<std::size_t>(rb) * kRows;
    const std::size_t i1 = std::min(i0 + kRows, n);
    for (std::size_t j0 = 0; j0 < m; j0 += kCols) {
      const std::size_t j1 = std::min(j0 + kCols, m);
      for (std::size_t p0 = 0; p0 < k; p0 += kDepth) {
        const std::size_t p1 = std::min(p0 + kDepth, k);
        if (i1 - i0 == kRows) {
          double* c0 = C + (i0 + 0) * m;
          double* c1 = C + (i0 + 1) * m;
          double* c2 = C + (i0 + 2) * m;
          double* c3 = C + (i0 + 3) * m;
          for (std::size_t p = p0; p < p1; ++p) {
            const double a0 = A[(i0 + 0) * k + p];
            const double a1 = A[(i0 + 1) * k + p];
            const double a2 = A[(i0 + 2) * k + p];
            const double a3 = A[(i0 + 3) * k + p];
            const double* brow = B + p * m;
            for (std::size_t j = j0; j < j1; ++j) {
              const double bj = brow[j];
              c0[j] += a0 * bj;
              c1[j] += a1 * bj;
              c2[j] += a2 * bj;
              c3[j] += a3 * bj;
            }
          }
        } else {
          for (std::size_t i = i0; i < i1; ++i) {
            double* crow = C + i * m;
            for (std::size_t p = p0; p < p1; ++p) {
              const double aip = A[i * k + p];
              const double* brow = B + p * m;
              for (std::size_t j = j0; j < j1; ++j) crow[j] += aip * brow[j];
            }
          }
        }
      }
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  return matmul(a, transpose(b));
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  return matmul(transpose(a), b);
}

Matrix layer_norm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                       double eps, std::span<double> mean, std::span<double> rstd) {
  check_affine(x, gain, bias);
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  Matrix y(rows, cols);
  const bool parallel = rows * cols >= kParallelThreshold;

#pragma omp parallel for schedule(static) if (parallel)
  for (long r = 0; r < static_cast<long>(rows); ++r) {
    const auto in = x.row(static_cast<std::size_t>(r));
    auto out = y.row(static_cast<std::size_t>(r));
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) out[c] = (in[c] - mu) * rs * gain[c] + bias[c];
    if (!mean.empty()) mean[static_cast<std::size_t>(r)] = mu;
    if (!rstd.empty()) rstd[static_cast<std::size_t>(r)] = rs;
  }
  return y;
}

void softmax_rows(Matrix& x) {
  const bool parallel = x.size() >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (parallel)
  for (long r = 0; r < static_cast<long>(x.rows()); ++r) {
    auto row = x.row(static_cast<std::size_t>(r));
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

namespace reference {

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.rows(), "matmul");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  check_inner(a.cols(), b.cols(), "matmul_nt");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  check_inner(a.rows(), b.rows(), "matmul_tn");
  Matrix c(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.rows(); ++p) s += a(p, i) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

Matrix layer_norm_rows(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                       double eps) {
  check_affine(x, gain, bias);
  Matrix y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) mu += x(r, c);
    mu /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= n;
    for (std::size_t c = 0; c < x.cols(); ++c)
      y(r, c) = (x(r, c) - mu) / std::sqrt(var + eps) * gain[c] + bias[c];
  }
  return y;
}

void softmax_rows(Matrix& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mx = x(r, 0);
    for (std::size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) sum += std::exp(x(r, c) - mx);
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = std::exp(x(r, c) - mx) / sum;
  }
}

}  // namespace reference

}  // namespace latref::kernels
