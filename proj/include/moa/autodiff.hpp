#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

// Reverse-mode tape. Ops append backward closures during the forward pass;
// backward() replays them in reverse construction order (a valid reverse
// topological order for any graph built by sequential op calls).
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }
  // Seeds loss->grad with 1, propagates, then clears the tape.
  void backward(const TensorPtr& loss);
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

// Ops record onto the active tape, if any. No active tape means pure forward.
Tape* active_tape();

// RAII: makes a fresh tape active for the current scope.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

// RAII: suspends recording (evaluation inside a training scope).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// When enabled, ops raise NumericalError on non-finite inputs.
void set_finite_guard(bool on);
bool finite_guard();

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  int64_t checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  bool pass = true;
};

// Central-difference check of d f / d inputs against the tape gradients.
// f must return a scalar tensor and be re-evaluable (pure in its inputs).
// Inputs must be f64 with requires_grad set. max_coords 0 checks every
// element; otherwise that many randomly chosen coordinates per input.
GradCheckReport grad_check(
    const std::function<TensorPtr(const std::vector<TensorPtr>&)>& f,
    const std::vector<TensorPtr>& inputs, double eps = 1e-5, double tol = 1e-4,
    Rng* rng = nullptr, int64_t max_coords = 0);

}  // namespace moa
