// AVX2+FMA kernel variants. This translation unit is the only one compiled
// with -mavx2 -mfma; callers reach it through the dispatch table so the rest
// of the binary stays runnable on any x86-64.

#include "kernels_internal.hpp"

#ifdef MOA_HAVE_AVX2_KERNELS

#include <immintrin.h>

#include <cmath>

namespace moa::kern::avx2 {

namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline double hsum4d(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

// Polynomial expf (Cephes coefficients), valid after clamping to +-88.37.
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);

  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  __m256 fx = _mm256_fmadd_ps(x, log2e, half);
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, c1, x);
  x = _mm256_fnmadd_ps(fx, c2, x);

  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, half);
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, one));

  __m256i n = _mm256_cvtps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

inline __m256 tanh256(__m256 x) {
  // tanh(x) = 1 - 2 / (exp(2x) + 1); exp clamp covers saturation.
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 two = _mm256_set1_ps(2.0f);
  __m256 e = exp256(_mm256_mul_ps(x, two));
  return _mm256_sub_ps(one, _mm256_div_ps(two, _mm256_add_ps(e, one)));
}

constexpr float kGeluC0 = 0.7978845608028654f;
constexpr float kGeluC1 = 0.044715f;

// C = A(m x k) . B(k x n), rows blocked by 4 so each B vector is reused.
void matmul_nn(const float* a, const float* b, float* c, int64_t m, int64_t n,
               int64_t k, bool acc) {
  int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    int64_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc0, acc1, acc2, acc3;
      if (acc) {
        acc0 = _mm256_loadu_ps(c + (i + 0) * n + j);
        acc1 = _mm256_loadu_ps(c + (i + 1) * n + j);
        acc2 = _mm256_loadu_ps(c + (i + 2) * n + j);
        acc3 = _mm256_loadu_ps(c + (i + 3) * n + j);
      } else {
        acc0 = acc1 = acc2 = acc3 = _mm256_setzero_ps();
      }
      for (int64_t p = 0; p < k; p++) {
        __m256 bv = _mm256_loadu_ps(b + p * n + j);
        acc0 = _mm256_fmadd_ps(_mm256_set1_ps(a[(i + 0) * k + p]), bv, acc0);
        acc1 = _mm256_fmadd_ps(_mm256_set1_ps(a[(i + 1) * k + p]), bv, acc1);
        acc2 = _mm256_fmadd_ps(_mm256_set1_ps(a[(i + 2) * k + p]), bv, acc2);
        acc3 = _mm256_fmadd_ps(_mm256_set1_ps(a[(i + 3) * k + p]), bv, acc3);
      }
      _mm256_storeu_ps(c + (i + 0) * n + j, acc0);
      _mm256_storeu_ps(c + (i + 1) * n + j, acc1);
      _mm256_storeu_ps(c + (i + 2) * n + j, acc2);
      _mm256_storeu_ps(c + (i + 3) * n + j, acc3);
    }
    for (; j < n; j++) {
      for (int64_t r = 0; r < 4; r++) {
        float s = acc ? c[(i + r) * n + j] : 0.0f;
        for (int64_t p = 0; p < k; p++) s += a[(i + r) * k + p] * b[p * n + j];
        c[(i + r) * n + j] = s;
      }
    }
  }
  for (; i < m; i++) {
    int64_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 s = acc ? _mm256_loadu_ps(c + i * n + j) : _mm256_setzero_ps();
      for (int64_t p = 0; p < k; p++)
        s = _mm256_fmadd_ps(_mm256_set1_ps(a[i * k + p]),
                            _mm256_loadu_ps(b + p * n + j), s);
      _mm256_storeu_ps(c + i * n + j, s);
    }
    for (; j < n; j++) {
      float s = acc ? c[i * n + j] : 0.0f;
      for (int64_t p = 0; p < k; p++) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

// C = A(m x k) . B^T with B stored (n x k): contiguous dot products.
void matmul_nt(const float* a, const float* b, float* c, int64_t m, int64_t n,
               int64_t k, bool acc) {
  for (int64_t i = 0; i < m; i++) {
    const float* ar = a + i * k;
    for (int64_t j = 0; j < n; j++) {
      const float* br = b + j * k;
      __m256 s0 = _mm256_setzero_ps();
      __m256 s1 = _mm256_setzero_ps();
      int64_t p = 0;
      for (; p + 16 <= k; p += 16) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(ar + p), _mm256_loadu_ps(br + p),
                             s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(ar + p + 8),
                             _mm256_loadu_ps(br + p + 8), s1);
      }
      for (; p + 8 <= k; p += 8)
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(ar + p), _mm256_loadu_ps(br + p),
                             s0);
      float s = hsum8(_mm256_add_ps(s0, s1));
      for (; p < k; p++) s += ar[p] * br[p];
      if (acc)
        c[i * n + j] += s;
      else
        c[i * n + j] = s;
    }
  }
}

// C = A^T . B with A stored (k x m): broadcast strided A, stream B rows.
void matmul_tn(const float* a, const float* b, float* c, int64_t m, int64_t n,
               int64_t k, bool acc) {
  for (int64_t i = 0; i < m; i++) {
    int64_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 s = acc ? _mm256_loadu_ps(c + i * n + j) : _mm256_setzero_ps();
      for (int64_t p = 0; p < k; p++)
        s = _mm256_fmadd_ps(_mm256_set1_ps(a[p * m + i]),
                            _mm256_loadu_ps(b + p * n + j), s);
      _mm256_storeu_ps(c + i * n + j, s);
    }
    for (; j < n; j++) {
      float s = acc ? c[i * n + j] : 0.0f;
      for (int64_t p = 0; p < k; p++) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

}  // namespace

void matmul_f32(const float* a, const float* b, float* c, int64_t m, int64_t n,
                int64_t k, bool ta, bool tb, bool acc) {
  if (!ta && !tb)
    matmul_nn(a, b, c, m, n, k, acc);
  else if (!ta && tb)
    matmul_nt(a, b, c, m, n, k, acc);
  else
    matmul_tn(a, b, c, m, n, k, acc);
}

void add_f32(float* dst, const float* a, const float* b, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; i++) dst[i] = a[i] + b[i];
}

void mul_f32(float* dst, const float* a, const float* b, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                            _mm256_loadu_ps(b + i)));
  for (; i < n; i++) dst[i] = a[i] * b[i];
}

void axpy_f32(float* y, const float* x, float alpha, int64_t n) {
  __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; i++) y[i] += alpha * x[i];
}

void scale_f32(float* dst, const float* x, float alpha, int64_t n) {
  __m256 av = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(dst + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  for (; i < n; i++) dst[i] = alpha * x[i];
}

void gelu_fwd_f32(float* y, const float* x, int64_t n) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 c0 = _mm256_set1_ps(kGeluC0);
  const __m256 c1 = _mm256_set1_ps(kGeluC1);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 x3 = _mm256_mul_ps(xv, _mm256_mul_ps(xv, xv));
    __m256 u = _mm256_mul_ps(c0, _mm256_fmadd_ps(c1, x3, xv));
    __m256 t = tanh256(u);
    _mm256_storeu_ps(
        y + i, _mm256_mul_ps(_mm256_mul_ps(half, xv), _mm256_add_ps(one, t)));
  }
  if (i < n) scalar::gelu_fwd_f32(y + i, x + i, n - i);
}

void gelu_bwd_f32(float* dx, const float* x, const float* dy, int64_t n) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 three = _mm256_set1_ps(3.0f);
  const __m256 c0 = _mm256_set1_ps(kGeluC0);
  const __m256 c1 = _mm256_set1_ps(kGeluC1);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 x2 = _mm256_mul_ps(xv, xv);
    __m256 u = _mm256_mul_ps(c0, _mm256_fmadd_ps(c1, _mm256_mul_ps(x2, xv), xv));
    __m256 t = tanh256(u);
    __m256 du = _mm256_mul_ps(c0, _mm256_fmadd_ps(_mm256_mul_ps(three, c1), x2, one));
    __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
    __m256 d = _mm256_fmadd_ps(_mm256_mul_ps(half, xv), _mm256_mul_ps(sech2, du),
                               _mm256_mul_ps(half, _mm256_add_ps(one, t)));
    _mm256_storeu_ps(dx + i, _mm256_fmadd_ps(_mm256_loadu_ps(dy + i), d,
                                             _mm256_loadu_ps(dx + i)));
  }
  if (i < n) scalar::gelu_bwd_f32(dx + i, x + i, dy + i, n - i);
}

void softmax_rows_f32(float* y, const float* x, int64_t rows, int64_t cols,
                      float* logz) {
  for (int64_t r = 0; r < rows; r++) {
    const float* xr = x + r * cols;
    float* yr = y + r * cols;
    __m256 mv = _mm256_set1_ps(-INFINITY);
    int64_t j = 0;
    for (; j + 8 <= cols; j += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(xr + j));
    float mx = -INFINITY;
    {
      alignas(32) float tmp[8];
      _mm256_store_ps(tmp, mv);
      for (int t = 0; t < 8; t++) mx = tmp[t] > mx ? tmp[t] : mx;
    }
    for (; j < cols; j++) mx = xr[j] > mx ? xr[j] : mx;

    __m256 mxv = _mm256_set1_ps(mx);
    __m256 sv = _mm256_setzero_ps();
    j = 0;
    for (; j + 8 <= cols; j += 8) {
      __m256 e = exp256(_mm256_sub_ps(_mm256_loadu_ps(xr + j), mxv));
      _mm256_storeu_ps(yr + j, e);
      sv = _mm256_add_ps(sv, e);
    }
    float sum = hsum8(sv);
    for (; j < cols; j++) {
      float e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    float inv = 1.0f / sum;
    __m256 iv = _mm256_set1_ps(inv);
    j = 0;
    for (; j + 8 <= cols; j += 8)
      _mm256_storeu_ps(yr + j, _mm256_mul_ps(iv, _mm256_loadu_ps(yr + j)));
    for (; j < cols; j++) yr[j] *= inv;
    if (logz) logz[r] = mx + std::log(sum);
  }
}

double sumsq_f32(const float* x, int64_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    s0 = _mm256_fmadd_pd(lo, lo, s0);
    s1 = _mm256_fmadd_pd(hi, hi, s1);
  }
  double s = hsum4d(_mm256_add_pd(s0, s1));
  for (; i < n; i++) s += double(x[i]) * double(x[i]);
  return s;
}

void adamw_f32(float* p, const float* g, float* m, float* v, int64_t n,
               float lr, float beta1, float beta2, float eps, float wd,
               float bc1, float bc2) {
  const __m256 b1 = _mm256_set1_ps(beta1);
  const __m256 b2 = _mm256_set1_ps(beta2);
  const __m256 ob1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 ob2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 ibc1 = _mm256_set1_ps(1.0f / bc1);
  const __m256 ibc2 = _mm256_set1_ps(1.0f / bc2);
  const __m256 epsv = _mm256_set1_ps(eps);
  const __m256 lrv = _mm256_set1_ps(lr);
  const __m256 decay = _mm256_set1_ps(1.0f - lr * wd);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 gv = _mm256_loadu_ps(g + i);
    __m256 mv = _mm256_fmadd_ps(b1, _mm256_loadu_ps(m + i), _mm256_mul_ps(ob1, gv));
    __m256 vv = _mm256_fmadd_ps(b2, _mm256_loadu_ps(v + i),
                                _mm256_mul_ps(ob2, _mm256_mul_ps(gv, gv)));
    _mm256_storeu_ps(m + i, mv);
    _mm256_storeu_ps(v + i, vv);
    __m256 mhat = _mm256_mul_ps(mv, ibc1);
    __m256 vhat = _mm256_mul_ps(vv, ibc2);
    __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv);
    __m256 pv = _mm256_mul_ps(_mm256_loadu_ps(p + i), decay);
    pv = _mm256_fnmadd_ps(lrv, _mm256_div_ps(mhat, denom), pv);
    _mm256_storeu_ps(p + i, pv);
  }
  if (i < n)
    scalar::adamw_f32(p + i, g + i, m + i, v + i, n - i, lr, beta1, beta2, eps,
                      wd, bc1, bc2);
}

void matmul_f64(const double* a, const double* b, double* c, int64_t m,
                int64_t n, int64_t k, bool ta, bool tb, bool acc) {
  if (!ta && !tb) {
    for (int64_t i = 0; i < m; i++) {
      int64_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d s = acc ? _mm256_loadu_pd(c + i * n + j) : _mm256_setzero_pd();
        for (int64_t p = 0; p < k; p++)
          s = _mm256_fmadd_pd(_mm256_set1_pd(a[i * k + p]),
                              _mm256_loadu_pd(b + p * n + j), s);
        _mm256_storeu_pd(c + i * n + j, s);
      }
      for (; j < n; j++) {
        double s = acc ? c[i * n + j] : 0.0;
        for (int64_t p = 0; p < k; p++) s += a[i * k + p] * b[p * n + j];
        c[i * n + j] = s;
      }
    }
  } else if (!ta && tb) {
    for (int64_t i = 0; i < m; i++) {
      for (int64_t j = 0; j < n; j++) {
        __m256d sv = _mm256_setzero_pd();
        int64_t p = 0;
        for (; p + 4 <= k; p += 4)
          sv = _mm256_fmadd_pd(_mm256_loadu_pd(a + i * k + p),
                               _mm256_loadu_pd(b + j * k + p), sv);
        double s = hsum4d(sv);
        for (; p < k; p++) s += a[i * k + p] * b[j * k + p];
        if (acc)
          c[i * n + j] += s;
        else
          c[i * n + j] = s;
      }
    }
  } else {
    for (int64_t i = 0; i < m; i++) {
      int64_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d s = acc ? _mm256_loadu_pd(c + i * n + j) : _mm256_setzero_pd();
        for (int64_t p = 0; p < k; p++)
          s = _mm256_fmadd_pd(_mm256_set1_pd(a[p * m + i]),
                              _mm256_loadu_pd(b + p * n + j), s);
        _mm256_storeu_pd(c + i * n + j, s);
      }
      for (; j < n; j++) {
        double s = acc ? c[i * n + j] : 0.0;
        for (int64_t p = 0; p < k; p++) s += a[p * m + i] * b[p * n + j];
        c[i * n + j] = s;
      }
    }
  }
}

}  // namespace moa::kern::avx2

#endif  // MOA_HAVE_AVX2_KERNELS
