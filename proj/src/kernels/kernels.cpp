#include "moa/kernels.hpp"

#include <cstdlib>
#include <cstring>

#include "kernels_internal.hpp"

namespace moa::kern {

namespace {

constexpr KernelsF32 kScalarF32 = {
    scalar::matmul_f32,  scalar::add_f32,          scalar::mul_f32,
    scalar::axpy_f32,    scalar::scale_f32,        scalar::gelu_fwd_f32,
    scalar::gelu_bwd_f32, scalar::softmax_rows_f32, scalar::sumsq_f32,
    scalar::adamw_f32,
};

constexpr KernelsF64 kScalarF64 = {
    scalar::matmul_f64,  scalar::add_f64,          scalar::mul_f64,
    scalar::axpy_f64,    scalar::scale_f64,        scalar::gelu_fwd_f64,
    scalar::gelu_bwd_f64, scalar::softmax_rows_f64, scalar::sumsq_f64,
    scalar::adamw_f64,
};

#ifdef MOA_HAVE_AVX2_KERNELS
constexpr KernelsF32 kAvx2F32 = {
    avx2::matmul_f32,  avx2::add_f32,          avx2::mul_f32,
    avx2::axpy_f32,    avx2::scale_f32,        avx2::gelu_fwd_f32,
    avx2::gelu_bwd_f32, avx2::softmax_rows_f32, avx2::sumsq_f32,
    avx2::adamw_f32,
};

// f64 is used for gradient checking; only matmul is hot enough to vectorize.
constexpr KernelsF64 kAvx2F64 = {
    avx2::matmul_f64,   scalar::add_f64,          scalar::mul_f64,
    scalar::axpy_f64,   scalar::scale_f64,        scalar::gelu_fwd_f64,
    scalar::gelu_bwd_f64, scalar::softmax_rows_f64, scalar::sumsq_f64,
    scalar::adamw_f64,
};
#endif

Backend detect_backend() {
#ifdef MOA_HAVE_AVX2_KERNELS
  if (const char* env = std::getenv("MOA_KERNEL_BACKEND")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::kScalar;
    if (std::strcmp(env, "avx2") == 0) return Backend::kAvx2;
  }
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
    return Backend::kAvx2;
#endif
  return Backend::kScalar;
}

Backend g_backend = detect_backend();

}  // namespace

const KernelsF32& f32_table(Backend b) {
#ifdef MOA_HAVE_AVX2_KERNELS
  if (b == Backend::kAvx2) return kAvx2F32;
#endif
  (void)b;
  return kScalarF32;
}

const KernelsF64& f64_table(Backend b) {
#ifdef MOA_HAVE_AVX2_KERNELS
  if (b == Backend::kAvx2) return kAvx2F64;
#endif
  (void)b;
  return kScalarF64;
}

const KernelsF32& f32() { return f32_table(g_backend); }
const KernelsF64& f64() { return f64_table(g_backend); }

Backend active_backend() { return g_backend; }

void set_backend(Backend b) {
#ifndef MOA_HAVE_AVX2_KERNELS
  b = Backend::kScalar;
#endif
  g_backend = b;
}

bool avx2_supported() {
#ifdef MOA_HAVE_AVX2_KERNELS
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

}  // namespace moa::kern
