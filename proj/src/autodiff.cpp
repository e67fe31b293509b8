#include "moa/autodiff.hpp"

#include <cmath>

namespace moa {

namespace {
thread_local Tape* g_tape = nullptr;
bool g_finite_guard = false;
}  // namespace

Tape* active_tape() { return g_tape; }

TapeScope::TapeScope() : prev_(g_tape) { g_tape = &tape_; }
TapeScope::~TapeScope() { g_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_tape) { g_tape = nullptr; }
NoGradScope::~NoGradScope() { g_tape = prev_; }

void set_finite_guard(bool on) { g_finite_guard = on; }
bool finite_guard() { return g_finite_guard; }

void Tape::backward(const TensorPtr& loss) {
  if (!loss || loss->numel() != 1)
    throw UsageError("backward: loss must be a scalar tensor");
  if (nodes_.empty()) throw UsageError("backward: tape is empty");
  if (!loss->requires_grad)
    throw UsageError("backward: loss does not require grad");
  loss->ensure_grad();
  loss->grad->set(0, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  clear();
}

GradCheckReport grad_check(
    const std::function<TensorPtr(const std::vector<TensorPtr>&)>& f,
    const std::vector<TensorPtr>& inputs, double eps, double tol, Rng* rng,
    int64_t max_coords) {
  for (const auto& in : inputs) {
    if (in->dtype != DType::kF64)
      throw UsageError("grad_check: inputs must be f64");
    if (!in->requires_grad)
      throw UsageError("grad_check: inputs must require grad");
  }

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope;
    TensorPtr loss = f(inputs);
    scope.tape().backward(loss);
    for (const auto& in : inputs) {
      if (in->grad)
        analytic.push_back(in->grad->f64);
      else
        analytic.emplace_back(in->numel(), 0.0);
      in->grad.reset();
    }
  }

  auto eval = [&]() {
    TensorPtr loss = f(inputs);  // no active tape: pure forward
    return loss->item();
  };

  GradCheckReport report;
  for (size_t i = 0; i < inputs.size(); i++) {
    Tensor& in = *inputs[i];
    GradCheckEntry entry;
    entry.name = strfmt("input%zu%s", i, shape_str(in.shape).c_str());
    int64_t n = in.numel();
    std::vector<int64_t> coords;
    if (max_coords <= 0 || n <= max_coords) {
      coords.resize(n);
      for (int64_t c = 0; c < n; c++) coords[c] = c;
    } else {
      if (!rng) throw UsageError("grad_check: rng required for sampling");
      for (int64_t c = 0; c < max_coords; c++)
        coords.push_back(rng->uniform_int(0, n - 1));
    }
    for (int64_t c : coords) {
      double saved = in.f64[c];
      in.f64[c] = saved + eps;
      double lp = eval();
      in.f64[c] = saved - eps;
      double lm = eval();
      in.f64[c] = saved;
      double fd = (lp - lm) / (2 * eps);
      double an = analytic[i][c];
      double rel = std::abs(an - fd) / (std::max(std::abs(an), std::abs(fd)) + 1e-6);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      entry.checked++;
    }
    entry.pass = entry.max_rel_err < tol;
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace moa
