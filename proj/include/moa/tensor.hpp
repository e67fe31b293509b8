#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "moa/common.hpp"
#include "moa/rng.hpp"

namespace moa {

enum class DType { kF32, kF64 };

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor. Training runs in f32; gradient checking uses f64.
// A tensor owns at most one of the two payload vectors, selected by dtype.
struct Tensor {
  std::vector<int64_t> shape;
  DType dtype = DType::kF32;
  bool requires_grad = false;
  std::vector<float> f32;
  std::vector<double> f64;
  // Allocated lazily by ensure_grad(); frozen tensors never get one.
  TensorPtr grad;

  int64_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const;  // negative indices count from the back

  float* d32() { return f32.data(); }
  const float* d32() const { return f32.data(); }
  double* d64() { return f64.data(); }
  const double* d64() const { return f64.data(); }

  // Dtype-agnostic element access by flat index (test/glue convenience).
  double get(int64_t i) const;
  void set(int64_t i, double v);
  double item() const;  // requires numel() == 1

  void ensure_grad();
  void zero_grad();
  bool all_finite() const;

  TensorPtr clone() const;       // copies data, drops grad
  TensorPtr to(DType dt) const;  // converting copy

  static TensorPtr zeros(std::vector<int64_t> shape, DType dt = DType::kF32,
                         bool requires_grad = false);
  static TensorPtr full(std::vector<int64_t> shape, double value,
                        DType dt = DType::kF32);
  static TensorPtr from_values(std::vector<int64_t> shape,
                               const std::vector<double>& values,
                               DType dt = DType::kF32,
                               bool requires_grad = false);
  static TensorPtr gaussian(Rng& rng, std::vector<int64_t> shape, double mean,
                            double stddev, DType dt = DType::kF32,
                            bool requires_grad = false);
};

// Integer matrix for token ids, targets, and labels.
struct IntMat {
  int64_t rows = 0, cols = 0;
  std::vector<int32_t> v;

  IntMat() = default;
  IntMat(int64_t r, int64_t c, int32_t fill = 0)
      : rows(r), cols(c), v(static_cast<size_t>(r * c), fill) {}
  int32_t& at(int64_t r, int64_t c) { return v[r * cols + c]; }
  int32_t at(int64_t r, int64_t c) const { return v[r * cols + c]; }
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// Exact value equality (so +0.0 and -0.0 compare equal, unlike memcmp).
bool tensors_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace moa
