#include "moa/tensor.hpp"

#include <cmath>

namespace moa {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); i++) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

int64_t Tensor::numel() const { return shape_numel(shape); }

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw UsageError(strfmt("dim index %d out of range for %s", i,
                            shape_str(shape).c_str()));
  return shape[i];
}

double Tensor::get(int64_t i) const {
  return dtype == DType::kF32 ? double(f32[i]) : f64[i];
}

void Tensor::set(int64_t i, double v) {
  if (dtype == DType::kF32)
    f32[i] = float(v);
  else
    f64[i] = v;
}

double Tensor::item() const {
  if (numel() != 1)
    throw UsageError(strfmt("item() on tensor of shape %s",
                            shape_str(shape).c_str()));
  return get(0);
}

void Tensor::ensure_grad() {
  if (!requires_grad)
    throw UsageError("ensure_grad on a frozen tensor");
  if (!grad) grad = Tensor::zeros(shape, dtype, false);
}

void Tensor::zero_grad() {
  if (!grad) return;
  if (dtype == DType::kF32)
    std::fill(grad->f32.begin(), grad->f32.end(), 0.0f);
  else
    std::fill(grad->f64.begin(), grad->f64.end(), 0.0);
}

bool Tensor::all_finite() const {
  if (dtype == DType::kF32) {
    for (float x : f32)
      if (!std::isfinite(x)) return false;
  } else {
    for (double x : f64)
      if (!std::isfinite(x)) return false;
  }
  return true;
}

TensorPtr Tensor::clone() const {
  auto t = std::make_shared<Tensor>();
  t->shape = shape;
  t->dtype = dtype;
  t->requires_grad = requires_grad;
  t->f32 = f32;
  t->f64 = f64;
  return t;
}

TensorPtr Tensor::to(DType dt) const {
  if (dt == dtype) return clone();
  auto t = Tensor::zeros(shape, dt, requires_grad);
  int64_t n = numel();
  for (int64_t i = 0; i < n; i++) t->set(i, get(i));
  return t;
}

TensorPtr Tensor::zeros(std::vector<int64_t> shape, DType dt,
                        bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->dtype = dt;
  t->requires_grad = requires_grad;
  int64_t n = shape_numel(shape);
  t->shape = std::move(shape);
  if (dt == DType::kF32)
    t->f32.assign(static_cast<size_t>(n), 0.0f);
  else
    t->f64.assign(static_cast<size_t>(n), 0.0);
  return t;
}

TensorPtr Tensor::full(std::vector<int64_t> shape, double value, DType dt) {
  auto t = zeros(std::move(shape), dt, false);
  int64_t n = t->numel();
  for (int64_t i = 0; i < n; i++) t->set(i, value);
  return t;
}

TensorPtr Tensor::from_values(std::vector<int64_t> shape,
                              const std::vector<double>& values, DType dt,
                              bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw UsageError(strfmt("from_values: %zu values for shape %s",
                            values.size(), shape_str(shape).c_str()));
  auto t = zeros(std::move(shape), dt, requires_grad);
  for (size_t i = 0; i < values.size(); i++) t->set(i, values[i]);
  return t;
}

TensorPtr Tensor::gaussian(Rng& rng, std::vector<int64_t> shape, double mean,
                           double stddev, DType dt, bool requires_grad) {
  auto t = zeros(std::move(shape), dt, requires_grad);
  int64_t n = t->numel();
  for (int64_t i = 0; i < n; i++) t->set(i, rng.gaussian(mean, stddev));
  return t;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape || a.dtype != b.dtype) return false;
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++)
    if (a.get(i) != b.get(i)) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw UsageError(strfmt("max_abs_diff: shapes %s vs %s",
                            shape_str(a.shape).c_str(),
                            shape_str(b.shape).c_str()));
  double worst = 0;
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++)
    worst = std::max(worst, std::abs(a.get(i) - b.get(i)));
  return worst;
}

}  // namespace moa
