// Reference kernels. Plain loops, written for clarity; the AVX2 variants are
// checked against these in the kernel equivalence tests.

#include <cmath>

#include "kernels_internal.hpp"

namespace moa::kern::scalar {

namespace {

template <typename T>
void matmul_impl(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k,
                 bool ta, bool tb, bool acc) {
  for (int64_t i = 0; i < m; i++) {
    for (int64_t j = 0; j < n; j++) {
      T s = 0;
      if (!ta && !tb) {
        for (int64_t p = 0; p < k; p++) s += a[i * k + p] * b[p * n + j];
      } else if (!ta && tb) {
        for (int64_t p = 0; p < k; p++) s += a[i * k + p] * b[j * k + p];
      } else {
        for (int64_t p = 0; p < k; p++) s += a[p * m + i] * b[p * n + j];
      }
      if (acc)
        c[i * n + j] += s;
      else
        c[i * n + j] = s;
    }
  }
}

template <typename T>
T gelu_one(T x) {
  const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
  const T c1 = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(c0 * (x + c1 * x * x * x)));
}

template <typename T>
T dgelu_one(T x) {
  const T c0 = T(0.7978845608028654);
  const T c1 = T(0.044715);
  T u = c0 * (x + c1 * x * x * x);
  T t = std::tanh(u);
  T du = c0 * (T(1) + T(3) * c1 * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
void softmax_rows_impl(T* y, const T* x, int64_t rows, int64_t cols, T* logz) {
  for (int64_t r = 0; r < rows; r++) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (int64_t j = 1; j < cols; j++) mx = xr[j] > mx ? xr[j] : mx;
    T sum = 0;
    for (int64_t j = 0; j < cols; j++) {
      T e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; j++) yr[j] *= inv;
    if (logz) logz[r] = mx + std::log(sum);
  }
}

template <typename T>
void adamw_impl(T* p, const T* g, T* m, T* v, int64_t n, T lr, T beta1, T beta2,
                T eps, T wd, T bc1, T bc2) {
  for (int64_t i = 0; i < n; i++) {
    m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
    v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
    T mhat = m[i] / bc1;
    T vhat = v[i] / bc2;
    p[i] = p[i] * (T(1) - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace

void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t n,
                int64_t k, bool ta, bool tb, bool acc) {
  matmul_impl(a, b, c, m, n, k, ta, tb, acc);
}
void add_f32(float* dst, const float* a, const float* b, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = a[i] + b[i];
}
void mul_f32(float* dst, const float* a, const float* b, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = a[i] * b[i];
}
void axpy_f32(float* y, const float* x, float alpha, int64_t n) {
  for (int64_t i = 0; i < n; i++) y[i] += alpha * x[i];
}
void scale_f32(float* dst, const float* x, float alpha, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = alpha * x[i];
}
void gelu_fwd_f32(float* y, const float* x, int64_t n) {
  for (int64_t i = 0; i < n; i++) y[i] = gelu_one(x[i]);
}
void gelu_bwd_f32(float* dx, const float* x, const float* dy, int64_t n) {
  for (int64_t i = 0; i < n; i++) dx[i] += dy[i] * dgelu_one(x[i]);
}
void softmax_rows_f32(float* y, const float* x, int64_t rows, int64_t cols,
                      float* logz) {
  softmax_rows_impl(y, x, rows, cols, logz);
}
double sumsq_f32(const float* x, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; i++) s += double(x[i]) * double(x[i]);
  return s;
}
void adamw_f32(float* p, const float* g, float* m, float* v, int64_t n,
               float lr, float beta1, float beta2, float eps, float wd,
               float bc1, float bc2) {
  adamw_impl(p, g, m, v, n, lr, beta1, beta2, eps, wd, bc1, bc2);
}

void matmul_f64(const double* a, const double* b, double* c, int64_t m,
                int64_t n, int64_t k, bool ta, bool tb, bool acc) {
  matmul_impl(a, b, c, m, n, k, ta, tb, acc);
}
void add_f64(double* dst, const double* a, const double* b, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = a[i] + b[i];
}
void mul_f64(double* dst, const double* a, const double* b, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = a[i] * b[i];
}
void axpy_f64(double* y, const double* x, double alpha, int64_t n) {
  for (int64_t i = 0; i < n; i++) y[i] += alpha * x[i];
}
void scale_f64(double* dst, const double* x, double alpha, int64_t n) {
  for (int64_t i = 0; i < n; i++) dst[i] = alpha * x[i];
}
void gelu_fwd_f64(double* y, const double* x, int64_t n) {
  for (int64_t i = 0; i < n; i++) y[i] = gelu_one(x[i]);
}
void gelu_bwd_f64(double* dx, const double* x, const double* dy, int64_t n) {
  for (int64_t i = 0; i < n; i++) dx[i] += dy[i] * dgelu_one(x[i]);
}
void softmax_rows_f64(double* y, const double* x, int64_t rows, int64_t cols,
                      double* logz) {
  softmax_rows_impl(y, x, rows, cols, logz);
}
double sumsq_f64(const double* x, int64_t n) {
  double s = 0;
  for (int64_t i = 0; i < n; i++) s += x[i] * x[i];
  return s;
}
void adamw_f64(double* p, const double* g, double* m, double* v, int64_t n,
               double lr, double beta1, double beta2, double eps, double wd,
               double bc1, double bc2) {
  adamw_impl(p, g, m, v, n, lr, beta1, beta2, eps, wd, bc1, bc2);
}

}  // namespace moa::kern::scalar
