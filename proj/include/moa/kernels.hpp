#pragma once

#include <cstdint>

// Low-level numeric kernels behind the tensor ops. Each entry has a scalar
// reference implementation and (on x86-64) an AVX2+FMA variant; the active
// table is chosen once at startup from CPUID and can be overridden for tests
// via set_backend() or the MOA_KERNEL_BACKEND environment variable
// ("scalar" | "avx2").
namespace moa::kern {

enum class Backend { kScalar, kAvx2 };

// matmul computes C (m x n) from A and B with optional transposed storage:
//   ta=false, tb=false : A is (m x k), B is (k x n), C = A.B
//   ta=false, tb=true  : A is (m x k), B is (n x k), C = A.B^T
//   ta=true,  tb=false : A is (k x m), B is (k x n), C = A^T.B
// acc=true accumulates into C instead of overwriting it.
struct KernelsF32 {
  void (*matmul)(const float* a, const float* b, float* c, int64_t m, int64_t n,
                 int64_t k, bool ta, bool tb, bool acc);
  void (*add)(float* dst, const float* a, const float* b, int64_t n);
  void (*mul)(float* dst, const float* a, const float* b, int64_t n);
  // y += alpha * x
  void (*axpy)(float* y, const float* x, float alpha, int64_t n);
  void (*scale)(float* dst, const float* x, float alpha, int64_t n);
  void (*gelu_fwd)(float* y, const float* x, int64_t n);
  // dx += dy * gelu'(x)
  void (*gelu_bwd)(float* dx, const float* x, const float* dy, int64_t n);
  // Row-wise softmax; if logz != nullptr also writes per-row log(sum(exp)).
  void (*softmax_rows)(float* y, const float* x, int64_t rows, int64_t cols,
                       float* logz);
  double (*sumsq)(const float* x, int64_t n);
  // Fused AdamW step. bc1/bc2 are the precomputed bias corrections
  // 1 - beta^t; wd is applied as decoupled decay p *= (1 - lr*wd).
  void (*adamw)(float* p, const float* g, float* m, float* v, int64_t n,
                float lr, float beta1, float beta2, float eps, float wd,
                float bc1, float bc2);
};

struct KernelsF64 {
  void (*matmul)(const double* a, const double* b, double* c, int64_t m,
                 int64_t n, int64_t k, bool ta, bool tb, bool acc);
  void (*add)(double* dst, const double* a, const double* b, int64_t n);
  void (*mul)(double* dst, const double* a, const double* b, int64_t n);
  void (*axpy)(double* y, const double* x, double alpha, int64_t n);
  void (*scale)(double* dst, const double* x, double alpha, int64_t n);
  void (*gelu_fwd)(double* y, const double* x, int64_t n);
  void (*gelu_bwd)(double* dx, const double* x, const double* dy, int64_t n);
  void (*softmax_rows)(double* y, const double* x, int64_t rows, int64_t cols,
                       double* logz);
  double (*sumsq)(const double* x, int64_t n);
  void (*adamw)(double* p, const double* g, double* m, double* v, int64_t n,
                double lr, double beta1, double beta2, double eps, double wd,
                double bc1, double bc2);
};

const KernelsF32& f32();
const KernelsF64& f64();

// Tables by backend, for direct equivalence testing.
const KernelsF32& f32_table(Backend b);
const KernelsF64& f64_table(Backend b);

Backend active_backend();
void set_backend(Backend b);
bool avx2_supported();

}  // namespace moa::kern
