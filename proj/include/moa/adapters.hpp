#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/data.hpp"
#include "moa/model.hpp"

namespace moa {

// One low-rank pair beside a base matrix: delta(x) = scale * (x A) B.
// B starts at zero so a fresh expert is an exact no-op.
struct LoraMat {
  TensorPtr A;  // (d_in, r)
  TensorPtr B;  // (r, d_out)
};

struct LoraExpert {
  int32_t domain_id = 0;
  int64_t rank = 8;
  double scale = 1.0;
  std::vector<MatrixSlot> slots;           // which matrices are adapted
  std::vector<std::vector<LoraMat>> mats;  // [layer][slot position]

  // nullptr when the slot is not adapted
  const LoraMat* mat(int64_t layer, MatrixSlot slot) const;
  std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;
};

std::vector<MatrixSlot> all_slots();

LoraExpert make_expert(const ModelConfig& config, int32_t domain_id,
                       int64_t rank, double scale,
                       const std::vector<MatrixSlot>& slots, uint64_t seed);

// scale * (x A) B without ever forming the dense A B product.
TensorPtr lora_delta(const TensorPtr& x, const LoraMat& m, double scale);

// x W0 + expert's delta for the slot (plain x W0 if the slot is unadapted).
TensorPtr apply_expert(const TensorPtr& x, const TensorPtr& w0,
                       const LoraExpert& e, int64_t layer, MatrixSlot slot);

// Sequence-level router in front of one transformer layer. Linear by
// default; mlp_hidden > 0 switches to a two-layer perceptron.
struct RouterLayer {
  int64_t mlp_hidden = 0;
  TensorPtr w, b;            // linear form: (d,N), (N)
  TensorPtr w1, b1, w2, b2;  // two-layer form
  std::vector<std::pair<std::string, TensorPtr>> named_tensors(
      int64_t layer) const;
};

RouterLayer make_router(int64_t hidden_dim, int64_t n_experts,
                        int64_t mlp_hidden, uint64_t seed, int64_t layer);

// Mean-pools the layer input over the first lengths[b] positions, then
// applies the router. One logit row per sequence.
TensorPtr router_logits(const RouterLayer& router, const TensorPtr& layer_input,
                        const std::vector<int64_t>& lengths);

int64_t count_router_params(int64_t num_layers, int64_t hidden_dim,
                            int64_t n_experts, int64_t mlp_hidden = 0);

struct MoaModel {
  BaseModel base;
  std::vector<LoraExpert> experts;  // experts[i].domain_id == i
  std::vector<RouterLayer> routers;  // one per transformer layer
  double eta = 0.1;

  int64_t n_experts() const { return static_cast<int64_t>(experts.size()); }
  void validate() const;
  std::vector<std::pair<std::string, TensorPtr>> adapter_tensors() const;
};

MoaModel make_moa(BaseModel base, int64_t n_experts, int64_t rank,
                  double scale, double eta, int64_t mlp_hidden,
                  const std::vector<MatrixSlot>& slots, uint64_t seed);

// ------------------------------------------------------------------ hooks

// Every row uses the same expert.
class SingleExpertHook : public AdapterHook {
 public:
  explicit SingleExpertHook(const LoraExpert* expert) : expert_(expert) {}
  TensorPtr delta(const HookCtx& ctx, const TensorPtr& x) override;

 private:
  const LoraExpert* expert_;
};

// Each sequence is processed by the expert named in seq_expert (hard
// teacher-forced routing during training, or the selected expert at
// inference).
class RoutedHook : public AdapterHook {
 public:
  RoutedHook(const std::vector<LoraExpert>* experts,
             std::vector<int32_t> seq_expert);
  TensorPtr delta(const HookCtx& ctx, const TensorPtr& x) override;

 private:
  const std::vector<LoraExpert>* experts_;
  std::vector<int32_t> seq_expert_;
  std::vector<std::vector<int64_t>> groups_;  // built on first delta call
  int64_t grouped_rows_ = -1;
};

// Token-level top-1 gating from the layer-input state. The selected
// expert is applied at full weight; gates are fixed (never trained).
struct MoeGates {
  std::vector<TensorPtr> w;  // per layer (d,N)
  std::vector<TensorPtr> b;  // per layer (N)
  std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;
};
MoeGates make_gates(const ModelConfig& config, int64_t n_experts,
                    uint64_t seed);

class GatedHook : public AdapterHook {
 public:
  GatedHook(const std::vector<LoraExpert>* experts, const MoeGates* gates);
  void on_layer_input(int64_t layer, const TensorPtr& layer_input,
                      const std::vector<int64_t>& lengths) override;
  TensorPtr delta(const HookCtx& ctx, const TensorPtr& x) override;
  const std::vector<int32_t>& assignment() const { return row_expert_; }

 private:
  const std::vector<LoraExpert>* experts_;
  const MoeGates* gates_;
  std::vector<int32_t> row_expert_;           // current layer's assignment
  std::vector<std::vector<int64_t>> groups_;  // rows per expert
};

// ---------------------------------------------------------------- training

struct LmForward {
  TensorPtr lm_sum;   // summed NLL over scored tokens (graph node)
  TensorPtr lm_loss;  // lm_sum / lm_count
  int64_t lm_count = 0;
};

struct MoaForward {
  TensorPtr lm_sum;
  TensorPtr lm_loss;
  int64_t lm_count = 0;
  TensorPtr cls_sum;   // summed router CE; detached when eta == 0
  TensorPtr cls_loss;  // cls_sum / (layers * batch)
  int64_t cls_count = 0;
  TensorPtr total;  // lm_loss + eta * cls_loss (the optimizer objective)
  std::vector<TensorPtr> router_logits;  // per layer, (B,N)
};

// Next-token NLL over the batch's scored positions, with any adaptation
// supplied by the hook. lm_loss is the mean over scored tokens; lm_sum is
// kept for gradient accumulation across micro-batches.
LmForward lm_forward(const BaseModel& base, const data::Batch& batch,
                     AdapterHook* hook);

// Teacher-forced joint objective: each sequence runs through the expert of
// its domain label, every layer's router is scored against that label, and
// total = lm_loss + eta * cls_loss. With eta == 0 the routing term is
// computed for reporting only and contributes no gradients.
MoaForward moa_train_forward(const MoaModel& model, const data::Batch& batch);

LmForward moe_gate_forward(const BaseModel& base,
                           const std::vector<LoraExpert>& experts,
                           const MoeGates& gates, const data::Batch& batch);

// --------------------------------------------------------------- selection

enum class SelectKind { kOracle, kVote, kLast };

struct Selection {
  int32_t expert = 0;
  std::vector<int32_t> votes;             // per-layer router argmax
  std::vector<std::vector<double>> probs;  // per-layer router softmax
};

// One pass over [bos] prompt [sep]. Routers fire in layer order; each
// layer's adapters use that layer's own argmax, so deeper routers see
// adapted states. vote = majority of the per-layer argmaxes (ties: higher
// summed softmax probability, then lower index); last = final layer's
// argmax. The returned expert then serves the whole request.
Selection select_expert(const MoaModel& model,
                        const std::vector<int32_t>& prompt_tokens,
                        SelectKind kind, int32_t oracle_label = -1);

// -------------------------------------------------------------- classifier

// Stand-in for an external encoder: own byte embedding, mean over prompt
// tokens, one linear layer.
struct DomainClassifier {
  TensorPtr embed;  // (V, dc)
  TensorPtr w;      // (dc, N)
  TensorPtr b;      // (N)
  std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;
};

DomainClassifier make_classifier(int64_t vocab, int64_t embed_dim,
                                 int64_t n_classes, uint64_t seed);
TensorPtr classifier_logits(const DomainClassifier& clf,
                            const std::vector<std::vector<int32_t>>& prompts);
int32_t classifier_select(const DomainClassifier& clf,
                          const std::vector<int32_t>& prompt);

}  // namespace moa
