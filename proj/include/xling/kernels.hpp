#pragma once

#include <cstdint>

// Dense f64 kernels behind the tensor ops. Every kernel has a serial
// reference implementation and an OpenMP one. The parallel versions assign
// each output element (or row) to exactly one thread and keep the inner
// reduction order fixed, so results are bit-identical to the serial path
// for any thread count. tools/bench_kernels compares the two.

namespace xling::kern {

enum class Unary { relu, gelu, tanh_fn, sigmoid };

namespace serial {

// c[m,n] = a[m,k] @ b[k,n]
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] = a[m,k] @ b[n,k]^T
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] = a[k,m]^T @ b[k,n]
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

void unary(Unary f, const double* x, double* y, int64_t n);
// dx += df(x) * gy
void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n);

void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
// dx += (gy - sum(gy*y)) * y, rowwise
void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols);

// y = (x - mean) / sqrt(var + eps) * gamma + beta, rowwise; xhat may be null
// if the caller does not need it.
void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps);
void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols);

void add(const double* a, const double* b, double* c, int64_t n);
void mul(const double* a, const double* b, double* c, int64_t n);
// y += a * x
void axpy(double a, const double* x, double* y, int64_t n);
void scale(const double* x, double a, double* y, int64_t n);

}  // namespace serial

namespace omp {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void unary(Unary f, const double* x, double* y, int64_t n);
void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n);
void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols);
void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps);
void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols);
void add(const double* a, const double* b, double* c, int64_t n);
void mul(const double* a, const double* b, double* c, int64_t n);
void axpy(double a, const double* x, double* y, int64_t n);
void scale(const double* x, double a, double* y, int64_t n);

}  // namespace omp

// Dispatching entry points: pick the OpenMP kernel when more than one thread
// is configured and the problem is large enough to amortize the fork.
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void matmul_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void unary(Unary f, const double* x, double* y, int64_t n);
void unary_backward(Unary f, const double* x, const double* y, const double* gy, double* dx,
                    int64_t n);
void softmax_rows(const double* x, double* y, int64_t rows, int64_t cols);
void softmax_rows_backward(const double* y, const double* gy, double* dx, int64_t rows,
                           int64_t cols);
void layernorm_rows(const double* x, const double* gamma, const double* beta, double* y,
                    double* xhat, double* inv_std, int64_t rows, int64_t cols, double eps);
void layernorm_rows_backward(const double* xhat, const double* inv_std, const double* gamma,
                             const double* gy, double* dx, double* dgamma, double* dbeta,
                             int64_t rows, int64_t cols);
void add(const double* a, const double* b, double* c, int64_t n);
void mul(const double* a, const double* b, double* c, int64_t n);
void axpy(double a, const double* x, double* y, int64_t n);
void scale(const double* x, double a, double* y, int64_t n);

int max_threads();

}  // namespace xling::kern
