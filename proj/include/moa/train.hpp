#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/data.hpp"
#include "moa/model.hpp"

namespace moa {

struct TrainConfig {
  double peak_lr = 3e-4;  // desk-scale default; 1e-5 is the large-model preset
  int64_t total_steps = 200;      // optimizer steps (micro-batches / accum)
  double warmup_fraction = 0.10;  // share of steps spent ramping up
  double clip_norm = 0.1;         // global L2 ceiling on the gradients
  int64_t accum_steps = 4;        // micro-batches folded into one update
  int64_t batch_size = 8;         // sequences per micro-batch
  double eta = 0.1;               // routing loss weight
  double weight_decay = 0.0;
  uint64_t seed = 2024;
  data::MaskMode loss_mask_mode = data::MaskMode::kFullSequence;
  int64_t eval_interval = 50;  // metric row cadence in steps; 0 = final only
  std::string metrics_path;    // JSONL file, overwritten per run; "" = none

  void validate() const;
  // Ramp length in steps: round(total * fraction), kept inside [1, total-1]
  // so the cosine leg always exists for total >= 2.
  int64_t warmup_steps() const;
};

// Linear 0 -> peak over the warmup, then cosine peak -> 0. Defined on
// 0 <= step <= total_steps.
double lr_at(int64_t step, const TrainConfig& cfg);

// Global L2 norm over the gradient buffers of params (absent grads count 0).
double global_grad_norm(const std::vector<TensorPtr>& params);

// Scales every gradient by max_norm / norm when the global norm exceeds
// max_norm. Returns the applied scale (1 when untouched). Non-finite
// gradients abort the step.
double clip_gradients(const std::vector<TensorPtr>& params, double max_norm);

// Bias-corrected AdamW with decoupled multiplicative weight decay. Keeps
// first/second moments only for trainable parameters; a parameter whose
// grad is absent at step() is left untouched.
class AdamW {
 public:
  explicit AdamW(const std::vector<TensorPtr>& params, double weight_decay = 0,
                 double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  void zero_grads();
  int64_t steps_taken() const { return t_; }
  const std::vector<TensorPtr>& params() const { return params_; }

 private:
  struct Slot {
    std::vector<float> m32, v32;
    std::vector<double> m64, v64;
  };
  std::vector<TensorPtr> params_;
  std::vector<Slot> slots_;
  double wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Construction knobs for the adapter stack built by the trainers.
struct AdapterSpec {
  int64_t rank = 8;
  double scale = 2.0;               // alpha / rank with alpha = 2 rank
  int64_t mlp_hidden = 0;           // router hidden width; 0 = linear router
  std::vector<MatrixSlot> slots;    // empty = adapt every matrix
  int64_t cls_embed = 64;           // classifier baseline embedding width

  std::vector<MatrixSlot> resolved_slots() const;
};

struct DomainData {
  std::vector<data::EncodedRecord> train;
  std::vector<data::EncodedRecord> val;
};

struct ExpertTrainResult {
  LoraExpert expert;
  std::vector<double> loss_curve;  // mean train NLL per optimizer step
  std::vector<std::string> metrics;
};

struct MoaTrainResult {
  MoaModel model;
  std::vector<double> loss_curve;  // total objective per optimizer step
  std::vector<double> lm_curve;
  std::vector<double> cls_curve;
  std::vector<std::string> metrics;
};

struct WarmupResult {
  std::vector<double> loss_curve;
  std::vector<std::string> metrics;
};

enum class BaselineKind { kSingleMixed, kMoeLora, kMoeLoraNaive, kClassifier };

struct BaselineResult {
  BaselineKind kind = BaselineKind::kSingleMixed;
  LoraExpert mixed;                 // kSingleMixed
  std::vector<LoraExpert> experts;  // kMoeLora / kMoeLoraNaive
  MoeGates gates;                   // kMoeLora / kMoeLoraNaive
  DomainClassifier classifier;      // kClassifier
  std::vector<double> loss_curve;
  std::vector<std::string> metrics;
};

// Short full-parameter language-model warm-up on the evenly mixed corpus.
// Gives the randomly initialized decoder usable representations, standing in
// for the pretrained checkpoint a full-scale run would start from. The model
// is trainable only for the duration of the call; it returns frozen.
WarmupResult warmup_base(BaseModel& base,
                         const std::vector<DomainData>& domains,
                         const TrainConfig& cfg);

// Stage 1: one expert, one domain, language loss only. The base stays
// frozen; only the expert's tensors receive updates.
ExpertTrainResult train_expert(const BaseModel& base, int32_t domain_id,
                               const DomainData& data, const AdapterSpec& spec,
                               const TrainConfig& cfg);

// Stage 2: joint training of fresh routers plus the stage-1 experts on
// evenly sampled mixed batches with teacher-forced routing. Total objective
// lm_loss + eta * cls_loss; eta comes from cfg. The experts are detached
// into private tensors first, so the caller's copies keep their stage-1
// values.
MoaTrainResult train_moa(BaseModel base, std::vector<LoraExpert> experts,
                         const std::vector<DomainData>& domains,
                         const AdapterSpec& spec, const TrainConfig& cfg);

// kSingleMixed: one expert over the union of domains (even sampling).
// kMoeLora: token-gated experts seeded from stage-1 (pass stage1; the
// inputs are detached first and stay untouched).
// kMoeLoraNaive: same but freshly initialized experts.
// kClassifier: domain classifier trained on the mixed prompt stream.
BaselineResult train_baseline(BaselineKind kind, const BaseModel& base,
                              const std::vector<LoraExpert>& stage1,
                              const std::vector<DomainData>& domains,
                              const AdapterSpec& spec, const TrainConfig& cfg);

}  // namespace moa
