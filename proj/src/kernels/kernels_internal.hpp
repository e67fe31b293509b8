#pragma once

#include <cstdint>

namespace moa::kern {

namespace scalar {
void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t n,
                int64_t k, bool ta, bool tb, bool acc);
void add_f32(float* dst, const float* a, const float* b, int64_t n);
void mul_f32(float* dst, const float* a, const float* b, int64_t n);
void axpy_f32(float* y, const float* x, float alpha, int64_t n);
void scale_f32(float* dst, const float* x, float alpha, int64_t n);
void gelu_fwd_f32(float* y, const float* x, int64_t n);
void gelu_bwd_f32(float* dx, const float* x, const float* dy, int64_t n);
void softmax_rows_f32(float* y, const float* x, int64_t rows, int64_t cols,
                      float* logz);
double sumsq_f32(const float* x, int64_t n);
void adamw_f32(float* p, const float* g, float* m, float* v, int64_t n,
               float lr, float beta1, float beta2, float eps, float wd,
               float bc1, float bc2);

void matmul_f64(const double* a, const double* b, double* c, int64_t m,
                int64_t n, int64_t k, bool ta, bool tb, bool acc);
void add_f64(double* dst, const double* a, const double* b, int64_t n);
void mul_f64(double* dst, const double* a, const double* b, int64_t n);
void axpy_f64(double* y, const double* x, double alpha, int64_t n);
void scale_f64(double* dst, const double* x, double alpha, int64_t n);
void gelu_fwd_f64(double* y, const double* x, int64_t n);
void gelu_bwd_f64(double* dx, const double* x, const double* dy, int64_t n);
void softmax_rows_f64(double* y, const double* x, int64_t rows, int64_t cols,
                      double* logz);
double sumsq_f64(const double* x, int64_t n);
void adamw_f64(double* p, const double* g, double* m, double* v, int64_t n,
               double lr, double beta1, double beta2, double eps, double wd,
               double bc1, double bc2);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define MOA_HAVE_AVX2_KERNELS 1
namespace avx2 {
void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t n,
                int64_t k, bool ta, bool tb, bool acc);
void add_f32(float* dst, const float* a, const float* b, int64_t n);
void mul_f32(float* dst, const float* a, const float* b, int64_t n);
void axpy_f32(float* y, const float* x, float alpha, int64_t n);
void scale_f32(float* dst, const float* x, float alpha, int64_t n);
void gelu_fwd_f32(float* y, const float* x, int64_t n);
void gelu_bwd_f32(float* dx, const float* x, const float* dy, int64_t n);
void softmax_rows_f32(float* y, const float* x, int64_t rows, int64_t cols,
                      float* logz);
double sumsq_f32(const float* x, int64_t n);
void adamw_f32(float* p, const float* g, float* m, float* v, int64_t n,
               float lr, float beta1, float beta2, float eps, float wd,
               float bc1, float bc2);

void matmul_f64(const double* a, const double* b, double* c, int64_t m,
                int64_t n, int64_t k, bool ta, bool tb, bool acc);
}  // namespace avx2
#endif

}  // namespace moa::kern
