#include "xling/kernels.hpp"

#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace xling::kern {

namespace {

inline double unary_fwd(Unary f, double x) {
  switch (f) {
    case Unary::relu:
      return x > 0.0 ? x : 0.0;
    case Unary::gelu: {
      // tanh approximation of gelu
      const double c = 0.7978845608028653558798921198687;  // sqrt(2/pi)
      const double inner = c * (x + 0.044715 * x * x * x);
      return 0.5 * x * (1.0 + std::tanh(inner));
    }
    case Unary::tanh_fn:
      return std::tanh(x);
    case Unary::sigmoid:
      return 1.0 / (1.0 + std::exp(-x));
  }
  return 0.0;
}

inline double unary_bwd(Unary f, double x, double y) {
  switch (f) {
    case Unary::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Unary::gelu: {
      const double c = 0.7978845608028653558798921198687;
      const double inner = c * (x + 0.044715 * x * x * x);
      const double t = std::tanh(inner);
      const double dinner = c * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    }
    case Unary::tanh_fn:
      return 1.0 - y * y;
    case Unary::sigmoid:
      return y * (1.0 - y);
  }
  return 0.0;
}

inline void matmul_row(const double* a, const double* b, double* c, int64_t i, int64_t k,
                       int64_t n) {
  double* ci = c + i * n;
  std::memset(ci, 0, static_cast<size_t>(n) * sizeof(double));
  const double* ai = a + i * k;
  for (int64_t p = 0; p < k; ++p) {
    const double aip = ai[p];
    const double* bp = b + p * n;
    for (int64_t j = 0; j < n; ++j) {
      ci[j] += aip * bp[j];
    }
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c, int64_t i, int64_t k,
                          int64_t n) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (int64_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (int64_t p = 0; p < k; ++p) {
      s += ai[p] * bj[p];
    }
    ci[j] = s;
  }
}

inline void softmax_row(const double* x, double* y, int64_t i, int64_t cols) {
  const double* xi = x + i * cols;
  double* yi = y + i * cols;
  double mx = xi[0];
  for (int64_t j = 1; j < cols; ++j) {
    if (xi[j] > mx) mx = xi[j];
  }
  double z = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    yi[j] = std::exp(xi[j] - mx);
    z += yi[j];
  }
  const double inv = 1.0 / z;
  for (int64_t j = 0; j < cols; ++j) {
    yi[j] *= inv;
  }
}

inline void softmax_row_backward(const double* y, const double* gy, double* dx, int64_t i,
                                 int64_t cols) {
  const double* yi = y + i * cols;
  const double* gi = gy + i * cols;
  double* di = dx + i * cols;
  double dot = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    dot += gi[j] * yi[j];
  }
  for (int64_t j = 0; j < cols; ++j) {
    di[j] += (gi[j] - dot) * yi[j];
  }
}

inline void layernorm_row(const double* x, const double* gamma, const double* beta, double* y,
                          double* xhat, double* inv_std, int64_t i, int64_t cols, double eps) {
  const double* xi = x + i * cols;
  double mean = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    mean += xi[j];
  }
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    const double d = xi[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  const double istd = 1.0 / std::sqrt(var + eps);
  inv_std[i] = istd;
  double* yi = y + i * cols;
  double* hi = xhat + i * cols;
  for (int64_t j = 0; j < cols; ++j) {
    const double h = (xi[j] - mean) * istd;
    hi[j] = h;
    yi[j] = h * gamma[j] + beta[j];
  }
}

inline void layernorm_row_backward_dx(const double* xhat, const double* inv_std,
                                      const double* gamma, const double* gy, double* dx,
                                      int64_t i, int64_t cols) {
  const double* hi = xhat + i * cols;
  const double* gi = gy + i * cols;
  double* di = dx + i * cols;
  double sum_g = 0.0;
  double sum_gh = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    const double gg = gi[j] * gamma[j];
    sum_g += gg;
    sum_gh += gg * hi[j];
  }
  const double n = static_cast<double>(cols);
  for (int64_t j = 0; j < cols; ++j) {
    const double gg = gi[j] * gamma[j];
    di[j] += inv_std[i] * (gg - sum_g / n - hi[j] * sum_gh / n);
  }
}

}  // namespace

// ---------------------------------------------------------------- serial

namespace serial {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    matmul_row(a, b, c, i, k, n);
  }
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    matmul_nt_row(a, b, c, i, k, n);
  }
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  // a is (k, m), b is (k, n), c is (m, n)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::memset(ci, 0, static_cast<size_t>(n) * sizeof(double));
    for (int64_t p = 0; p < k; ++p) {
      const double aip = a[p * m + i];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) {
        ci[j] += aip * bp[j];
      }
    }
  }
}

void unary(Unary f, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    y[i] = unary_fwd(f, x[i]);
  }
}

void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    dx[i] += unary_bwd(f, x[i], y[i]) * gy[i];
  }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    softmax_row(x, y, i, cols);
  }
}

void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    softmax_row_backward(y, gy, dx, i, cols);
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps) {
  for (int64_t i = 0; i < rows; ++i) {
    layernorm_row(x, gamma, beta, y, xhat, inv_std, i, cols, eps);
  }
}

void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    layernorm_row_backward_dx(xhat, inv_std, gamma, gy, dx, i, cols);
  }
  // dgamma/dbeta reduce over rows; fixed row order keeps this deterministic.
  for (int64_t i = 0; i < rows; ++i) {
    const double* hi = xhat + i * cols;
    const double* gi = gy + i * cols;
    for (int64_t j = 0; j < cols; ++j) {
      dgamma[j] += gi[j] * hi[j];
      dbeta[j] += gi[j];
    }
  }
}

void add(const double* a, const double* b, double* c, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    c[i] = a[i] + b[i];
  }
}

void mul(const double* a, const double* b, double* c, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    c[i] = a[i] * b[i];
  }
}

void axpy(double a, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    y[i] += a * x[i];
  }
}

void scale(const double* x, double a, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    y[i] = a * x[i];
  }
}

}  // namespace serial

// ---------------------------------------------------------------- OpenMP

namespace omp {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    matmul_row(a, b, c, i, k, n);
  }
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    matmul_nt_row(a, b, c, i, k, n);
  }
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::memset(ci, 0, static_cast<size_t>(n) * sizeof(double));
    for (int64_t p = 0; p < k; ++p) {
      const double aip = a[p * m + i];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) {
        ci[j] += aip * bp[j];
      }
    }
  }
}

void unary(Unary f, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    y[i] = unary_fwd(f, x[i]);
  }
}

void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    dx[i] += unary_bwd(f, x[i], y[i]) * gy[i];
  }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    softmax_row(x, y, i, cols);
  }
}

void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    softmax_row_backward(y, gy, dx, i, cols);
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    layernorm_row(x, gamma, beta, y, xhat, inv_std, i, cols, eps);
  }
}

void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    layernorm_row_backward_dx(xhat, inv_std, gamma, gy, dx, i, cols);
  }
  // Row-order reduction kept serial so it matches the reference bit for bit.
  for (int64_t i = 0; i < rows; ++i) {
    const double* hi = xhat + i * cols;
    const double* gi = gy + i * cols;
    for (int64_t j = 0; j < cols; ++j) {
      dgamma[j] += gi[j] * hi[j];
      dbeta[j] += gi[j];
    }
  }
}

void add(const double* a, const double* b, double* c, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    c[i] = a[i] + b[i];
  }
}

void mul(const double* a, const double* b, double* c, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    c[i] = a[i] * b[i];
  }
}

void axpy(double a, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    y[i] += a * x[i];
  }
}

void scale(const double* x, double a, double* y, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    y[i] = a * x[i];
  }
}

}  // namespace omp

// ---------------------------------------------------------------- dispatch

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {
// Below this many output elements the fork/join overhead dominates.
constexpr int64_t kParallelCutoff = 4096;
inline bool go_parallel(int64_t work) { return max_threads() > 1 && work >= kParallelCutoff; }
}  // namespace

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  if (go_parallel(m * n)) {
    omp::matmul(a, b, c, m, k, n);
  } else {
    serial::matmul(a, b, c, m, k, n);
  }
}

void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  if (go_parallel(m * n)) {
    omp::matmul_nt(a, b, c, m, k, n);
  } else {
    serial::matmul_nt(a, b, c, m, k, n);
  }
}

void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  if (go_parallel(m * n)) {
    omp::matmul_tn(a, b, c, m, k, n);
  } else {
    serial::matmul_tn(a, b, c, m, k, n);
  }
}

void unary(Unary f, const double* x, double* y, int64_t n) {
  if (go_parallel(n)) {
    omp::unary(f, x, y, n);
  } else {
    serial::unary(f, x, y, n);
  }
}

void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n) {
  if (go_parallel(n)) {
    omp::unary_backward(f, x, y, gy, dx, n);
  } else {
    serial::unary_backward(f, x, y, gy, dx, n);
  }
}

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols) {
  if (go_parallel(rows * cols)) {
    omp::softmax_rows(x, y, rows, cols);
  } else {
    serial::softmax_rows(x, y, rows, cols);
  }
}

void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols) {
  if (go_parallel(rows * cols)) {
    omp::softmax_rows_backward(y, gy, dx, rows, cols);
  } else {
    serial::softmax_rows_backward(y, gy, dx, rows, cols);
  }
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps) {
  if (go_parallel(rows * cols)) {
    omp::layernorm_rows(x, gamma, beta, y, xhat, inv_std, rows, cols, eps);
  } else {
    serial::layernorm_rows(x, gamma, beta, y, xhat, inv_std, rows, cols, eps);
  }
}

void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols) {
  if (go_parallel(rows * cols)) {
    omp::layernorm_rows_backward(xhat, inv_std, gamma, gy, dx, dgamma, dbeta, rows, cols);
  } else {
    serial::layernorm_rows_backward(xhat, inv_std, gamma, gy, dx, dgamma, dbeta, rows, cols);
  }
}

void add(const double* a, const double* b, double* c, int64_t n) {
  if (go_parallel(n)) {
    omp::add(a, b, c, n);
  } else {
    serial::add(a, b, c, n);
  }
}

void mul(const double* a, const double* b, double* c, int64_t n) {
  if (go_parallel(n)) {
    omp::mul(a, b, c, n);
  } else {
    serial::mul(a, b, c, n);
  }
}

void axpy(double a, const double* x, double* y, int64_t n) {
  if (go_parallel(n)) {
    omp::axpy(a, x, y, n);
  } else {
    serial::axpy(a, x, y, n);
  }
}

void scale(const double* x, double a, double* y, int64_t n) {
  if (go_parallel(n)) {
    omp::scale(x, a, y, n);
  } else {
    serial::scale(x, a, y, n);
  }
}

}  // namespace xling::kern
