#include "moa/ops.hpp"

#include <cmath>
#include <cstring>

#include "moa/kernels.hpp"

namespace moa::ops {

namespace {

template <typename T>
struct Kern;
template <>
struct Kern<float> {
  static const kern::KernelsF32& get() { return kern::f32(); }
  static float* data(Tensor& t) { return t.f32.data(); }
  static const float* data(const Tensor& t) { return t.f32.data(); }
};
template <>
struct Kern<double> {
  static const kern::KernelsF64& get() { return kern::f64(); }
  static double* data(Tensor& t) { return t.f64.data(); }
  static const double* data(const Tensor& t) { return t.f64.data(); }
};

#define MOA_DISPATCH(dt, fn, ...) \
  ((dt) == DType::kF32 ? fn<float>(__VA_ARGS__) : fn<double>(__VA_ARGS__))

void check_dtype(const char* op, const TensorPtr& a, const TensorPtr& b) {
  if (a->dtype != b->dtype) throw UsageError(strfmt("%s: mixed dtypes", op));
}

void guard(const char* op, std::initializer_list<const TensorPtr*> ts) {
  if (!finite_guard()) return;
  for (const TensorPtr* t : ts)
    if (!(*t)->all_finite())
      throw NumericalError(strfmt("%s: non-finite input", op));
}

void record(const TensorPtr& out, std::function<void()> fn) {
  if (Tape* t = active_tape(); t && out->requires_grad)
    t->record(std::move(fn));
}

[[noreturn]] void shape_error(const char* op, const TensorPtr& a,
                              const TensorPtr& b) {
  throw UsageError(strfmt("%s: incompatible shapes %s and %s", op,
                          shape_str(a->shape).c_str(),
                          shape_str(b->shape).c_str()));
}

// ------------------------------------------------------------------- matmul

struct MatmulPlan {
  int64_t batch, m, k, n;
  bool b_batched;
};

MatmulPlan matmul_plan(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() == 2 && b->rank() == 2) {
    if (a->shape[1] != b->shape[0]) shape_error("matmul", a, b);
    return {1, a->shape[0], a->shape[1], b->shape[1], false};
  }
  if (a->rank() == 3 && b->rank() == 2) {
    if (a->shape[2] != b->shape[0]) shape_error("matmul", a, b);
    return {a->shape[0], a->shape[1], a->shape[2], b->shape[1], false};
  }
  if (a->rank() == 3 && b->rank() == 3) {
    if (a->shape[0] != b->shape[0] || a->shape[2] != b->shape[1])
      shape_error("matmul", a, b);
    return {a->shape[0], a->shape[1], a->shape[2], b->shape[2], true};
  }
  shape_error("matmul", a, b);
}

template <typename T>
void matmul_fwd(const Tensor& a, const Tensor& b, Tensor& out,
                const MatmulPlan& p) {
  const auto& K = Kern<T>::get();
  const T* ap = Kern<T>::data(a);
  const T* bp = Kern<T>::data(b);
  T* op = Kern<T>::data(out);
  if (!p.b_batched) {
    K.matmul(ap, bp, op, p.batch * p.m, p.n, p.k, false, false, false);
  } else {
    for (int64_t i = 0; i < p.batch; i++)
      K.matmul(ap + i * p.m * p.k, bp + i * p.k * p.n, op + i * p.m * p.n, p.m,
               p.n, p.k, false, false, false);
  }
}

template <typename T>
void matmul_bwd(const TensorPtr& a, const TensorPtr& b, const TensorPtr& out,
                const MatmulPlan& p) {
  const auto& K = Kern<T>::get();
  const T* dout = Kern<T>::data(*out->grad);
  if (a->requires_grad) {
    a->ensure_grad();
    T* da = Kern<T>::data(*a->grad);
    const T* bp = Kern<T>::data(*b);
    if (!p.b_batched) {
      K.matmul(dout, bp, da, p.batch * p.m, p.k, p.n, false, true, true);
    } else {
      for (int64_t i = 0; i < p.batch; i++)
        K.matmul(dout + i * p.m * p.n, bp + i * p.k * p.n, da + i * p.m * p.k,
                 p.m, p.k, p.n, false, true, true);
    }
  }
  if (b->requires_grad) {
    b->ensure_grad();
    T* db = Kern<T>::data(*b->grad);
    const T* ap = Kern<T>::data(*a);
    if (!p.b_batched) {
      K.matmul(ap, dout, db, p.k, p.n, p.batch * p.m, true, false, true);
    } else {
      for (int64_t i = 0; i < p.batch; i++)
        K.matmul(ap + i * p.m * p.k, dout + i * p.m * p.n, db + i * p.k * p.n,
                 p.k, p.n, p.m, true, false, true);
    }
  }
}

// -------------------------------------------------------- add / mul / scale

template <typename T>
void add_fwd(const Tensor& a, const Tensor& b, Tensor& out) {
  const auto& K = Kern<T>::get();
  int64_t bn = b.numel();
  int64_t blocks = a.numel() / bn;
  const T* ap = Kern<T>::data(a);
  const T* bp = Kern<T>::data(b);
  T* op = Kern<T>::data(out);
  for (int64_t i = 0; i < blocks; i++) K.add(op + i * bn, ap + i * bn, bp, bn);
}

template <typename T>
void add_bwd(const TensorPtr& a, const TensorPtr& b, const TensorPtr& out) {
  const auto& K = Kern<T>::get();
  const T* dy = Kern<T>::data(*out->grad);
  int64_t bn = b->numel();
  int64_t blocks = a->numel() / bn;
  if (a->requires_grad) {
    a->ensure_grad();
    K.axpy(Kern<T>::data(*a->grad), dy, T(1), a->numel());
  }
  if (b->requires_grad) {
    b->ensure_grad();
    T* db = Kern<T>::data(*b->grad);
    for (int64_t i = 0; i < blocks; i++) K.axpy(db, dy + i * bn, T(1), bn);
  }
}

template <typename T>
void mul_bwd(const TensorPtr& a, const TensorPtr& b, const TensorPtr& out) {
  const T* dy = Kern<T>::data(*out->grad);
  int64_t n = a->numel();
  if (a->requires_grad) {
    a->ensure_grad();
    T* da = Kern<T>::data(*a->grad);
    const T* bp = Kern<T>::data(*b);
    for (int64_t i = 0; i < n; i++) da[i] += dy[i] * bp[i];
  }
  if (b->requires_grad) {
    b->ensure_grad();
    T* db = Kern<T>::data(*b->grad);
    const T* ap = Kern<T>::data(*a);
    for (int64_t i = 0; i < n; i++) db[i] += dy[i] * ap[i];
  }
}

// ------------------------------------------------------------------ softmax

template <typename T>
void softmax_bwd_rows(const Tensor& y, const Tensor& dy_t, Tensor& dx_t,
                      int64_t rows, int64_t cols) {
  const T* yp = Kern<T>::data(y);
  const T* dy = Kern<T>::data(dy_t);
  T* dx = Kern<T>::data(dx_t);
  for (int64_t r = 0; r < rows; r++) {
    const T* yr = yp + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    T dot = 0;
    for (int64_t j = 0; j < cols; j++) dot += yr[j] * dyr[j];
    for (int64_t j = 0; j < cols; j++) dxr[j] += yr[j] * (dyr[j] - dot);
  }
}

// ----------------------------------------------------------------- rms_norm

template <typename T>
void rms_norm_fwd(const Tensor& x, const Tensor& gain, Tensor& out,
                  std::vector<T>& inv_cache, double eps) {
  int64_t d = gain.numel();
  int64_t rows = x.numel() / d;
  const T* xp = Kern<T>::data(x);
  const T* gp = Kern<T>::data(gain);
  T* op = Kern<T>::data(out);
  inv_cache.resize(rows);
  for (int64_t r = 0; r < rows; r++) {
    const T* xr = xp + r * d;
    T ms = 0;
    for (int64_t j = 0; j < d; j++) ms += xr[j] * xr[j];
    T inv = T(1) / std::sqrt(ms / T(d) + T(eps));
    inv_cache[r] = inv;
    T* orow = op + r * d;
    for (int64_t j = 0; j < d; j++) orow[j] = xr[j] * inv * gp[j];
  }
}

template <typename T>
void rms_norm_bwd(const TensorPtr& x, const TensorPtr& gain,
                  const TensorPtr& out, const std::vector<T>& inv_cache) {
  int64_t d = gain->numel();
  int64_t rows = x->numel() / d;
  const T* xp = Kern<T>::data(*x);
  const T* gp = Kern<T>::data(*gain);
  const T* dy = Kern<T>::data(*out->grad);
  T* dxp = nullptr;
  T* dgp = nullptr;
  if (x->requires_grad) {
    x->ensure_grad();
    dxp = Kern<T>::data(*x->grad);
  }
  if (gain->requires_grad) {
    gain->ensure_grad();
    dgp = Kern<T>::data(*gain->grad);
  }
  for (int64_t r = 0; r < rows; r++) {
    const T* xr = xp + r * d;
    const T* dyr = dy + r * d;
    T inv = inv_cache[r];
    if (dgp)
      for (int64_t j = 0; j < d; j++) dgp[j] += dyr[j] * xr[j] * inv;
    if (dxp) {
      T s = 0;
      for (int64_t j = 0; j < d; j++) s += dyr[j] * gp[j] * xr[j];
      T c = inv * inv * inv * s / T(d);
      T* dxr = dxp + r * d;
      for (int64_t j = 0; j < d; j++) dxr[j] += dyr[j] * gp[j] * inv - xr[j] * c;
    }
  }
}

// -------------------------------------------------------------- cross entropy

template <typename T>
void cross_entropy_fwd(const Tensor& logits, const std::vector<int32_t>& tgt,
                       Tensor& out, std::vector<T>& probs) {
  const auto& K = Kern<T>::get();
  int64_t R = logits.shape[0], C = logits.shape[1];
  const T* lp = Kern<T>::data(logits);
  T* op = Kern<T>::data(out);
  probs.resize(R * C);
  std::vector<T> logz(R);
  K.softmax_rows(probs.data(), lp, R, C, logz.data());
  for (int64_t r = 0; r < R; r++) {
    int32_t t = tgt[r];
    op[r] = t < 0 ? T(0) : logz[r] - lp[r * C + t];
  }
}

template <typename T>
void cross_entropy_bwd(const TensorPtr& logits, const std::vector<int32_t>& tgt,
                       const TensorPtr& out, const std::vector<T>& probs) {
  logits->ensure_grad();
  int64_t R = logits->shape[0], C = logits->shape[1];
  const T* dnll = Kern<T>::data(*out->grad);
  T* dl = Kern<T>::data(*logits->grad);
  const auto& K = Kern<T>::get();
  for (int64_t r = 0; r < R; r++) {
    int32_t t = tgt[r];
    if (t < 0 || dnll[r] == T(0)) continue;
    K.axpy(dl + r * C, probs.data() + r * C, dnll[r], C);
    dl[r * C + t] -= dnll[r];
  }
}

// ----------------------------------------------------------------- attention

template <typename T>
struct AttnCache {
  std::vector<T> q, k, v;  // (B,H,T,hd) packs; rope applied, q also scaled
  std::vector<T> att;      // per (b,h): L x L probabilities at block stride T*T
  std::vector<T> cos, sin;  // (T, hd/2) rotation table
};

template <typename T>
void rope_table(std::vector<T>& cos_t, std::vector<T>& sin_t, int64_t seq,
                int64_t hd, double base) {
  int64_t half = hd / 2;
  cos_t.resize(seq * half);
  sin_t.resize(seq * half);
  for (int64_t t = 0; t < seq; t++) {
    for (int64_t i = 0; i < half; i++) {
      double theta =
          base > 0 ? double(t) * std::pow(base, -2.0 * double(i) / double(hd))
                   : 0.0;
      cos_t[t * half + i] = T(std::cos(theta));
      sin_t[t * half + i] = T(std::sin(theta));
    }
  }
}

template <typename T>
void attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v,
                   Tensor& out, int64_t H, const std::vector<int64_t>& lengths,
                   double rope_base, AttnCache<T>& cache) {
  const auto& K = Kern<T>::get();
  const int64_t B = q.shape[0], S = q.shape[1], d = q.shape[2];
  const int64_t hd = d / H, half = hd / 2;
  const T qscale = T(1) / std::sqrt(T(hd));
  rope_table(cache.cos, cache.sin, S, hd, rope_base);
  cache.q.assign(B * H * S * hd, T(0));
  cache.k.assign(B * H * S * hd, T(0));
  cache.v.assign(B * H * S * hd, T(0));
  cache.att.assign(B * H * S * S, T(0));
  const T* qp = Kern<T>::data(q);
  const T* kp = Kern<T>::data(k);
  const T* vp = Kern<T>::data(v);
  T* op = Kern<T>::data(out);
  std::vector<T> scores(S * S), ctx(S * hd);

  for (int64_t b = 0; b < B; b++) {
    const int64_t L = lengths[b];
    for (int64_t h = 0; h < H; h++) {
      T* qh = cache.q.data() + (b * H + h) * S * hd;
      T* kh = cache.k.data() + (b * H + h) * S * hd;
      T* vh = cache.v.data() + (b * H + h) * S * hd;
      T* ah = cache.att.data() + (b * H + h) * S * S;  // first L*L used
      for (int64_t t = 0; t < L; t++) {
        const T* qs = qp + (b * S + t) * d + h * hd;
        const T* ks = kp + (b * S + t) * d + h * hd;
        const T* vs = vp + (b * S + t) * d + h * hd;
        const T* ct = cache.cos.data() + t * half;
        const T* st = cache.sin.data() + t * half;
        for (int64_t i = 0; i < half; i++) {
          T q0 = qs[2 * i], q1 = qs[2 * i + 1];
          T k0 = ks[2 * i], k1 = ks[2 * i + 1];
          qh[t * hd + 2 * i] = (q0 * ct[i] - q1 * st[i]) * qscale;
          qh[t * hd + 2 * i + 1] = (q0 * st[i] + q1 * ct[i]) * qscale;
          kh[t * hd + 2 * i] = k0 * ct[i] - k1 * st[i];
          kh[t * hd + 2 * i + 1] = k0 * st[i] + k1 * ct[i];
        }
        std::memcpy(vh + t * hd, vs, hd * sizeof(T));
      }
      if (L == 0) continue;
      K.matmul(qh, kh, scores.data(), L, L, hd, false, true, false);
      for (int64_t t = 0; t < L; t++)
        for (int64_t j = t + 1; j < L; j++) scores[t * L + j] = T(-1e30);
      K.softmax_rows(ah, scores.data(), L, L, nullptr);
      K.matmul(ah, vh, ctx.data(), L, hd, L, false, false, false);
      for (int64_t t = 0; t < L; t++)
        std::memcpy(op + (b * S + t) * d + h * hd, ctx.data() + t * hd,
                    hd * sizeof(T));
    }
  }
}

template <typename T>
void attention_bwd(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                   const TensorPtr& out, int64_t H,
                   const std::vector<int64_t>& lengths,
                   const AttnCache<T>& cache) {
  const auto& K = Kern<T>::get();
  const int64_t B = q->shape[0], S = q->shape[1], d = q->shape[2];
  const int64_t hd = d / H, half = hd / 2;
  const T qscale = T(1) / std::sqrt(T(hd));
  const T* doutp = Kern<T>::data(*out->grad);
  T* dq = nullptr;
  T* dk = nullptr;
  T* dv = nullptr;
  if (q->requires_grad) {
    q->ensure_grad();
    dq = Kern<T>::data(*q->grad);
  }
  if (k->requires_grad) {
    k->ensure_grad();
    dk = Kern<T>::data(*k->grad);
  }
  if (v->requires_grad) {
    v->ensure_grad();
    dv = Kern<T>::data(*v->grad);
  }
  std::vector<T> dctx(S * hd), datt(S * S), ds(S * S), dqh(S * hd),
      dkh(S * hd), dvh(S * hd);

  for (int64_t b = 0; b < B; b++) {
    const int64_t L = lengths[b];
    if (L == 0) continue;
    for (int64_t h = 0; h < H; h++) {
      const T* qh = cache.q.data() + (b * H + h) * S * hd;
      const T* kh = cache.k.data() + (b * H + h) * S * hd;
      const T* vh = cache.v.data() + (b * H + h) * S * hd;
      const T* ah = cache.att.data() + (b * H + h) * S * S;
      for (int64_t t = 0; t < L; t++)
        std::memcpy(dctx.data() + t * hd, doutp + (b * S + t) * d + h * hd,
                    hd * sizeof(T));
      // datt = dctx . v^T ; dv = att^T . dctx
      K.matmul(dctx.data(), vh, datt.data(), L, L, hd, false, true, false);
      K.matmul(ah, dctx.data(), dvh.data(), L, hd, L, true, false, false);
      // softmax backward per row (masked entries have att = 0).
      for (int64_t t = 0; t < L; t++) {
        const T* ar = ah + t * L;
        const T* dar = datt.data() + t * L;
        T* dsr = ds.data() + t * L;
        T dot = 0;
        for (int64_t j = 0; j < L; j++) dot += ar[j] * dar[j];
        for (int64_t j = 0; j < L; j++) dsr[j] = ar[j] * (dar[j] - dot);
      }
      // dq~ = ds . k ; dk~ = ds^T . q~
      K.matmul(ds.data(), kh, dqh.data(), L, hd, L, false, false, false);
      K.matmul(ds.data(), qh, dkh.data(), L, hd, L, true, false, false);
      // Undo rope (rotate by -theta) and the folded q scale; scatter back.
      for (int64_t t = 0; t < L; t++) {
        const T* ct = cache.cos.data() + t * half;
        const T* st = cache.sin.data() + t * half;
        if (dq) {
          T* dst = dq + (b * S + t) * d + h * hd;
          for (int64_t i = 0; i < half; i++) {
            T g0 = dqh[t * hd + 2 * i] * qscale;
            T g1 = dqh[t * hd + 2 * i + 1] * qscale;
            dst[2 * i] += g0 * ct[i] + g1 * st[i];
            dst[2 * i + 1] += -g0 * st[i] + g1 * ct[i];
          }
        }
        if (dk) {
          T* dst = dk + (b * S + t) * d + h * hd;
          for (int64_t i = 0; i < half; i++) {
            T g0 = dkh[t * hd + 2 * i];
            T g1 = dkh[t * hd + 2 * i + 1];
            dst[2 * i] += g0 * ct[i] + g1 * st[i];
            dst[2 * i + 1] += -g0 * st[i] + g1 * ct[i];
          }
        }
        if (dv) {
          T* dst = dv + (b * S + t) * d + h * hd;
          for (int64_t i = 0; i < hd; i++) dst[i] += dvh[t * hd + i];
        }
      }
    }
  }
}

}  // namespace

// ============================================================== public ops

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  check_dtype("matmul", a, b);
  guard("matmul", {&a, &b});
  MatmulPlan p = matmul_plan(a, b);
  std::vector<int64_t> oshape =
      a->rank() == 2 ? std::vector<int64_t>{p.m, p.n}
                     : std::vector<int64_t>{p.batch, p.m, p.n};
  auto out = Tensor::zeros(std::move(oshape), a->dtype,
                           a->requires_grad || b->requires_grad);
  MOA_DISPATCH(a->dtype, matmul_fwd, *a, *b, *out, p);
  record(out, [a, b, out, p]() {
    if (!out->grad) return;
    MOA_DISPATCH(a->dtype, matmul_bwd, a, b, out, p);
  });
  return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_dtype("add", a, b);
  guard("add", {&a, &b});
  // b must equal a's shape or a trailing suffix of it.
  if (b->rank() > a->rank()) shape_error("add", a, b);
  for (int i = 1; i <= b->rank(); i++)
    if (b->dim(-i) != a->dim(-i)) shape_error("add", a, b);
  auto out = Tensor::zeros(a->shape, a->dtype,
                           a->requires_grad || b->requires_grad);
  MOA_DISPATCH(a->dtype, add_fwd, *a, *b, *out);
  record(out, [a, b, out]() {
    if (!out->grad) return;
    MOA_DISPATCH(a->dtype, add_bwd, a, b, out);
  });
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_dtype("mul", a, b);
  guard("mul", {&a, &b});
  if (a->shape != b->shape) shape_error("mul", a, b);
  auto out = Tensor::zeros(a->shape, a->dtype,
                           a->requires_grad || b->requires_grad);
  if (a->dtype == DType::kF32)
    kern::f32().mul(out->d32(), a->d32(), b->d32(), a->numel());
  else
    kern::f64().mul(out->d64(), a->d64(), b->d64(), a->numel());
  record(out, [a, b, out]() {
    if (!out->grad) return;
    MOA_DISPATCH(a->dtype, mul_bwd, a, b, out);
  });
  return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
  guard("scale", {&a});
  auto out = Tensor::zeros(a->shape, a->dtype, a->requires_grad);
  if (a->dtype == DType::kF32)
    kern::f32().scale(out->d32(), a->d32(), float(s), a->numel());
  else
    kern::f64().scale(out->d64(), a->d64(), s, a->numel());
  record(out, [a, out, s]() {
    if (!out->grad || !a->requires_grad) return;
    a->ensure_grad();
    if (a->dtype == DType::kF32)
      kern::f32().axpy(a->grad->d32(), out->grad->d32(), float(s), a->numel());
    else
      kern::f64().axpy(a->grad->d64(), out->grad->d64(), s, a->numel());
  });
  return out;
}

TensorPtr transpose(const TensorPtr& a) {
  guard("transpose", {&a});
  if (a->rank() != 2)
    throw UsageError(strfmt("transpose: expected rank 2, got %s",
                            shape_str(a->shape).c_str()));
  int64_t m = a->shape[0], n = a->shape[1];
  auto out = Tensor::zeros({n, m}, a->dtype, a->requires_grad);
  for (int64_t i = 0; i < m; i++)
    for (int64_t j = 0; j < n; j++) out->set(j * m + i, a->get(i * n + j));
  record(out, [a, out, m, n]() {
    if (!out->grad || !a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < m; i++)
      for (int64_t j = 0; j < n; j++)
        a->grad->set(i * n + j,
                     a->grad->get(i * n + j) + out->grad->get(j * m + i));
  });
  return out;
}

TensorPtr embedding_lookup(const TensorPtr& table, const IntMat& ids) {
  guard("embedding_lookup", {&table});
  if (table->rank() != 2)
    throw UsageError("embedding_lookup: table must be rank 2");
  int64_t V = table->shape[0], d = table->shape[1];
  for (int32_t id : ids.v)
    if (id < 0 || id >= V)
      throw UsageError(
          strfmt("embedding_lookup: token id %d outside vocabulary of %lld",
                 id, static_cast<long long>(V)));
  auto out =
      Tensor::zeros({ids.rows, ids.cols, d}, table->dtype, table->requires_grad);
  int64_t n = ids.rows * ids.cols;
  if (table->dtype == DType::kF32) {
    for (int64_t i = 0; i < n; i++)
      std::memcpy(out->d32() + i * d, table->d32() + int64_t(ids.v[i]) * d,
                  d * sizeof(float));
  } else {
    for (int64_t i = 0; i < n; i++)
      std::memcpy(out->d64() + i * d, table->d64() + int64_t(ids.v[i]) * d,
                  d * sizeof(double));
  }
  IntMat ids_copy = ids;
  record(out, [table, out, ids_copy, d, n]() {
    if (!out->grad || !table->requires_grad) return;
    table->ensure_grad();
    if (table->dtype == DType::kF32) {
      for (int64_t i = 0; i < n; i++)
        kern::f32().axpy(table->grad->d32() + int64_t(ids_copy.v[i]) * d,
                         out->grad->d32() + i * d, 1.0f, d);
    } else {
      for (int64_t i = 0; i < n; i++)
        kern::f64().axpy(table->grad->d64() + int64_t(ids_copy.v[i]) * d,
                         out->grad->d64() + i * d, 1.0, d);
    }
  });
  return out;
}

TensorPtr softmax(const TensorPtr& x) {
  guard("softmax", {&x});
  if (x->rank() < 1) throw UsageError("softmax: rank must be >= 1");
  int64_t cols = x->dim(-1);
  int64_t rows = x->numel() / cols;
  auto out = Tensor::zeros(x->shape, x->dtype, x->requires_grad);
  if (x->dtype == DType::kF32)
    kern::f32().softmax_rows(out->d32(), x->d32(), rows, cols, nullptr);
  else
    kern::f64().softmax_rows(out->d64(), x->d64(), rows, cols, nullptr);
  record(out, [x, out, rows, cols]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    MOA_DISPATCH(x->dtype, softmax_bwd_rows, *out, *out->grad, *x->grad, rows,
                 cols);
  });
  return out;
}

TensorPtr rms_norm(const TensorPtr& x, const TensorPtr& gain, double eps) {
  check_dtype("rms_norm", x, gain);
  guard("rms_norm", {&x, &gain});
  if (gain->rank() != 1 || x->rank() < 1 || x->dim(-1) != gain->numel())
    shape_error("rms_norm", x, gain);
  auto out = Tensor::zeros(x->shape, x->dtype,
                           x->requires_grad || gain->requires_grad);
  if (x->dtype == DType::kF32) {
    auto inv = std::make_shared<std::vector<float>>();
    rms_norm_fwd<float>(*x, *gain, *out, *inv, eps);
    record(out, [x, gain, out, inv]() {
      if (!out->grad) return;
      rms_norm_bwd<float>(x, gain, out, *inv);
    });
  } else {
    auto inv = std::make_shared<std::vector<double>>();
    rms_norm_fwd<double>(*x, *gain, *out, *inv, eps);
    record(out, [x, gain, out, inv]() {
      if (!out->grad) return;
      rms_norm_bwd<double>(x, gain, out, *inv);
    });
  }
  return out;
}

TensorPtr gelu(const TensorPtr& x) {
  guard("gelu", {&x});
  auto out = Tensor::zeros(x->shape, x->dtype, x->requires_grad);
  if (x->dtype == DType::kF32)
    kern::f32().gelu_fwd(out->d32(), x->d32(), x->numel());
  else
    kern::f64().gelu_fwd(out->d64(), x->d64(), x->numel());
  record(out, [x, out]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    if (x->dtype == DType::kF32)
      kern::f32().gelu_bwd(x->grad->d32(), x->d32(), out->grad->d32(),
                           x->numel());
    else
      kern::f64().gelu_bwd(x->grad->d64(), x->d64(), out->grad->d64(),
                           x->numel());
  });
  return out;
}

namespace {
struct AxisSpan {
  int64_t outer, ax, inner;
};
AxisSpan axis_span(const std::vector<int64_t>& shape, int axis) {
  AxisSpan s{1, shape[axis], 1};
  for (int i = 0; i < axis; i++) s.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); i++) s.inner *= shape[i];
  return s;
}
}  // namespace

TensorPtr concat(const TensorPtr& a, const TensorPtr& b, int axis) {
  check_dtype("concat", a, b);
  guard("concat", {&a, &b});
  if (a->rank() != b->rank()) shape_error("concat", a, b);
  if (axis < 0) axis += a->rank();
  if (axis < 0 || axis >= a->rank()) throw UsageError("concat: bad axis");
  for (int i = 0; i < a->rank(); i++)
    if (i != axis && a->shape[i] != b->shape[i]) shape_error("concat", a, b);
  std::vector<int64_t> oshape = a->shape;
  oshape[axis] += b->shape[axis];
  auto out = Tensor::zeros(oshape, a->dtype,
                           a->requires_grad || b->requires_grad);
  AxisSpan sa = axis_span(a->shape, axis);
  AxisSpan sb = axis_span(b->shape, axis);
  int64_t arow = sa.ax * sa.inner, brow = sb.ax * sb.inner;
  int64_t orow = arow + brow;
  for (int64_t o = 0; o < sa.outer; o++) {
    for (int64_t i = 0; i < arow; i++)
      out->set(o * orow + i, a->get(o * arow + i));
    for (int64_t i = 0; i < brow; i++)
      out->set(o * orow + arow + i, b->get(o * brow + i));
  }
  record(out, [a, b, out, sa, arow, brow, orow]() {
    if (!out->grad) return;
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t o = 0; o < sa.outer; o++)
        for (int64_t i = 0; i < arow; i++)
          a->grad->set(o * arow + i, a->grad->get(o * arow + i) +
                                         out->grad->get(o * orow + i));
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t o = 0; o < sa.outer; o++)
        for (int64_t i = 0; i < brow; i++)
          b->grad->set(o * brow + i, b->grad->get(o * brow + i) +
                                         out->grad->get(o * orow + arow + i));
    }
  });
  return out;
}

TensorPtr slice(const TensorPtr& x, int axis, int64_t start, int64_t len) {
  guard("slice", {&x});
  if (axis < 0) axis += x->rank();
  if (axis < 0 || axis >= x->rank()) throw UsageError("slice: bad axis");
  if (start < 0 || len < 0 || start + len > x->shape[axis])
    throw UsageError(strfmt("slice: [%lld,%lld) out of range for axis %d of %s",
                            static_cast<long long>(start),
                            static_cast<long long>(start + len), axis,
                            shape_str(x->shape).c_str()));
  std::vector<int64_t> oshape = x->shape;
  oshape[axis] = len;
  auto out = Tensor::zeros(oshape, x->dtype, x->requires_grad);
  AxisSpan s = axis_span(x->shape, axis);
  int64_t xrow = s.ax * s.inner, orow = len * s.inner;
  for (int64_t o = 0; o < s.outer; o++)
    for (int64_t i = 0; i < orow; i++)
      out->set(o * orow + i, x->get(o * xrow + start * s.inner + i));
  record(out, [x, out, s, xrow, orow, start]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    for (int64_t o = 0; o < s.outer; o++)
      for (int64_t i = 0; i < orow; i++) {
        int64_t xi = o * xrow + start * s.inner + i;
        x->grad->set(xi, x->grad->get(xi) + out->grad->get(o * orow + i));
      }
  });
  return out;
}

TensorPtr mean_pool(const TensorPtr& x, const std::vector<int64_t>& lengths) {
  guard("mean_pool", {&x});
  if (x->rank() != 3) throw UsageError("mean_pool: expected rank 3 input");
  int64_t B = x->shape[0], S = x->shape[1], d = x->shape[2];
  if (static_cast<int64_t>(lengths.size()) != B)
    throw UsageError("mean_pool: lengths size mismatch");
  for (int64_t len : lengths)
    if (len < 1 || len > S)
      throw UsageError(strfmt("mean_pool: length %lld outside [1,%lld]",
                              static_cast<long long>(len),
                              static_cast<long long>(S)));
  auto out = Tensor::zeros({B, d}, x->dtype, x->requires_grad);
  for (int64_t b = 0; b < B; b++) {
    double invl = 1.0 / double(lengths[b]);
    if (x->dtype == DType::kF32) {
      for (int64_t t = 0; t < lengths[b]; t++)
        kern::f32().axpy(out->d32() + b * d, x->d32() + (b * S + t) * d,
                         float(invl), d);
    } else {
      for (int64_t t = 0; t < lengths[b]; t++)
        kern::f64().axpy(out->d64() + b * d, x->d64() + (b * S + t) * d, invl,
                         d);
    }
  }
  auto lens = lengths;
  record(out, [x, out, lens, B, S, d]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    for (int64_t b = 0; b < B; b++) {
      double invl = 1.0 / double(lens[b]);
      if (x->dtype == DType::kF32) {
        for (int64_t t = 0; t < lens[b]; t++)
          kern::f32().axpy(x->grad->d32() + (b * S + t) * d,
                           out->grad->d32() + b * d, float(invl), d);
      } else {
        for (int64_t t = 0; t < lens[b]; t++)
          kern::f64().axpy(x->grad->d64() + (b * S + t) * d,
                           out->grad->d64() + b * d, invl, d);
      }
    }
  });
  return out;
}

TensorPtr cross_entropy(const TensorPtr& logits,
                        const std::vector<int32_t>& targets) {
  guard("cross_entropy", {&logits});
  if (logits->rank() != 2)
    throw UsageError("cross_entropy: logits must be rank 2");
  int64_t R = logits->shape[0], C = logits->shape[1];
  if (static_cast<int64_t>(targets.size()) != R)
    throw UsageError(strfmt("cross_entropy: %zu targets for %lld rows",
                            targets.size(), static_cast<long long>(R)));
  for (int32_t t : targets)
    if (t >= C || t < -1)
      throw UsageError(strfmt("cross_entropy: target %d outside [0,%lld)", t,
                              static_cast<long long>(C)));
  auto out = Tensor::zeros({R}, logits->dtype, logits->requires_grad);
  if (logits->dtype == DType::kF32) {
    auto probs = std::make_shared<std::vector<float>>();
    cross_entropy_fwd<float>(*logits, targets, *out, *probs);
    auto tgt = targets;
    record(out, [logits, out, tgt, probs]() {
      if (!out->grad || !logits->requires_grad) return;
      cross_entropy_bwd<float>(logits, tgt, out, *probs);
    });
  } else {
    auto probs = std::make_shared<std::vector<double>>();
    cross_entropy_fwd<double>(*logits, targets, *out, *probs);
    auto tgt = targets;
    record(out, [logits, out, tgt, probs]() {
      if (!out->grad || !logits->requires_grad) return;
      cross_entropy_bwd<double>(logits, tgt, out, *probs);
    });
  }
  return out;
}

TensorPtr sum(const TensorPtr& x) {
  guard("sum", {&x});
  auto out = Tensor::zeros({}, x->dtype, x->requires_grad);
  double s = 0;
  int64_t n = x->numel();
  for (int64_t i = 0; i < n; i++) s += x->get(i);
  out->set(0, s);
  record(out, [x, out, n]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    double g = out->grad->get(0);
    if (x->dtype == DType::kF32) {
      float gf = float(g);
      float* dx = x->grad->d32();
      for (int64_t i = 0; i < n; i++) dx[i] += gf;
    } else {
      double* dx = x->grad->d64();
      for (int64_t i = 0; i < n; i++) dx[i] += g;
    }
  });
  return out;
}

TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> new_shape) {
  if (shape_numel(new_shape) != x->numel())
    throw UsageError(strfmt("reshape: %s to %s changes numel",
                            shape_str(x->shape).c_str(),
                            shape_str(new_shape).c_str()));
  auto out = std::make_shared<Tensor>();
  out->shape = std::move(new_shape);
  out->dtype = x->dtype;
  out->requires_grad = x->requires_grad;
  out->f32 = x->f32;
  out->f64 = x->f64;
  record(out, [x, out]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    if (x->dtype == DType::kF32)
      kern::f32().axpy(x->grad->d32(), out->grad->d32(), 1.0f, x->numel());
    else
      kern::f64().axpy(x->grad->d64(), out->grad->d64(), 1.0, x->numel());
  });
  return out;
}

TensorPtr gather_rows(const TensorPtr& x, const std::vector<int64_t>& idx) {
  guard("gather_rows", {&x});
  if (x->rank() != 2) throw UsageError("gather_rows: expected rank 2");
  int64_t R = x->shape[0], D = x->shape[1];
  for (int64_t i : idx)
    if (i < 0 || i >= R)
      throw UsageError(strfmt("gather_rows: row %lld outside [0,%lld)",
                              static_cast<long long>(i),
                              static_cast<long long>(R)));
  auto out = Tensor::zeros({static_cast<int64_t>(idx.size()), D}, x->dtype,
                           x->requires_grad);
  if (x->dtype == DType::kF32) {
    for (size_t i = 0; i < idx.size(); i++)
      std::memcpy(out->d32() + i * D, x->d32() + idx[i] * D,
                  D * sizeof(float));
  } else {
    for (size_t i = 0; i < idx.size(); i++)
      std::memcpy(out->d64() + i * D, x->d64() + idx[i] * D,
                  D * sizeof(double));
  }
  auto ix = idx;
  record(out, [x, out, ix, D]() {
    if (!out->grad || !x->requires_grad) return;
    x->ensure_grad();
    if (x->dtype == DType::kF32) {
      for (size_t i = 0; i < ix.size(); i++)
        kern::f32().axpy(x->grad->d32() + ix[i] * D, out->grad->d32() + i * D,
                         1.0f, D);
    } else {
      for (size_t i = 0; i < ix.size(); i++)
        kern::f64().axpy(x->grad->d64() + ix[i] * D, out->grad->d64() + i * D,
                         1.0, D);
    }
  });
  return out;
}

TensorPtr merge_rows(const std::vector<TensorPtr>& pieces,
                     const std::vector<std::vector<int64_t>>& groups,
                     int64_t rows_out) {
  if (pieces.empty() || pieces.size() != groups.size())
    throw UsageError("merge_rows: pieces/groups mismatch");
  int64_t D = pieces[0]->dim(-1);
  DType dt = pieces[0]->dtype;
  bool rg = false;
  std::vector<char> seen(rows_out, 0);
  for (size_t g = 0; g < pieces.size(); g++) {
    guard("merge_rows", {&pieces[g]});
    if (pieces[g]->rank() != 2 || pieces[g]->shape[1] != D ||
        pieces[g]->dtype != dt)
      throw UsageError("merge_rows: piece shape/dtype mismatch");
    if (pieces[g]->shape[0] != static_cast<int64_t>(groups[g].size()))
      throw UsageError("merge_rows: piece rows != group size");
    rg = rg || pieces[g]->requires_grad;
    for (int64_t r : groups[g]) {
      if (r < 0 || r >= rows_out || seen[r])
        throw UsageError("merge_rows: rows must cover output exactly once");
      seen[r] = 1;
    }
  }
  for (int64_t r = 0; r < rows_out; r++)
    if (!seen[r]) throw UsageError("merge_rows: uncovered output row");

  auto out = Tensor::zeros({rows_out, D}, dt, rg);
  for (size_t g = 0; g < pieces.size(); g++) {
    const auto& piece = *pieces[g];
    for (size_t i = 0; i < groups[g].size(); i++) {
      if (dt == DType::kF32)
        std::memcpy(out->d32() + groups[g][i] * D, piece.d32() + i * D,
                    D * sizeof(float));
      else
        std::memcpy(out->d64() + groups[g][i] * D, piece.d64() + i * D,
                    D * sizeof(double));
    }
  }
  auto ps = pieces;
  auto gs = groups;
  record(out, [ps, gs, out, D, dt]() {
    if (!out->grad) return;
    for (size_t g = 0; g < ps.size(); g++) {
      if (!ps[g]->requires_grad) continue;
      ps[g]->ensure_grad();
      for (size_t i = 0; i < gs[g].size(); i++) {
        if (dt == DType::kF32)
          kern::f32().axpy(ps[g]->grad->d32() + i * D,
                           out->grad->d32() + gs[g][i] * D, 1.0f, D);
        else
          kern::f64().axpy(ps[g]->grad->d64() + i * D,
                           out->grad->d64() + gs[g][i] * D, 1.0, D);
      }
    }
  });
  return out;
}

TensorPtr attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                    int64_t n_heads, const std::vector<int64_t>& lengths,
                    double rope_base) {
  check_dtype("attention", q, k);
  check_dtype("attention", q, v);
  guard("attention", {&q, &k, &v});
  if (q->rank() != 3 || q->shape != k->shape || q->shape != v->shape)
    shape_error("attention", q, k);
  int64_t B = q->shape[0], S = q->shape[1], d = q->shape[2];
  if (n_heads < 1 || d % n_heads != 0 || (d / n_heads) % 2 != 0)
    throw UsageError(
        strfmt("attention: head count %lld incompatible with width %lld",
               static_cast<long long>(n_heads), static_cast<long long>(d)));
  if (static_cast<int64_t>(lengths.size()) != B)
    throw UsageError("attention: lengths size mismatch");
  for (int64_t len : lengths)
    if (len < 0 || len > S)
      throw UsageError("attention: length exceeds sequence dimension");
  bool rg = q->requires_grad || k->requires_grad || v->requires_grad;
  auto out = Tensor::zeros(q->shape, q->dtype, rg);
  auto lens = lengths;
  if (q->dtype == DType::kF32) {
    auto cache = std::make_shared<AttnCache<float>>();
    attention_fwd<float>(*q, *k, *v, *out, n_heads, lens, rope_base, *cache);
    record(out, [q, k, v, out, n_heads, lens, cache]() {
      if (!out->grad) return;
      attention_bwd<float>(q, k, v, out, n_heads, lens, *cache);
    });
  } else {
    auto cache = std::make_shared<AttnCache<double>>();
    attention_fwd<double>(*q, *k, *v, *out, n_heads, lens, rope_base, *cache);
    record(out, [q, k, v, out, n_heads, lens, cache]() {
      if (!out->grad) return;
      attention_bwd<double>(q, k, v, out, n_heads, lens, *cache);
    });
  }
  return out;
}

}  // namespace moa::ops
