#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/common.hpp"
#include "moa/tensor.hpp"

namespace moa {

struct ModelConfig {
  int64_t num_layers = 2;
  int64_t hidden_dim = 64;
  int64_t num_heads = 4;
  int64_t ffn_dim = 256;
  int64_t vocab_size = 256;
  int64_t max_seq_len = 256;
  bool rope_enabled = true;

  void validate() const;
  double rope_base() const { return rope_enabled ? 10000.0 : 0.0; }
};

// The six weight matrices adapters can sit beside in each layer.
enum class MatrixSlot { kQ, kK, kV, kO, kFfnUp, kFfnDown };
constexpr int kNumSlots = 6;
const char* slot_name(MatrixSlot slot);

struct Layer {
  TensorPtr wq, wk, wv, wo;        // (d,d)
  TensorPtr ffn_up;                // (d,ffn)
  TensorPtr ffn_down;              // (ffn,d)
  TensorPtr attn_norm, ffn_norm;   // (d) gains
};

// Decoder-only transformer whose own weights stay frozen while adapters
// train. Construction freezes everything; a warm-up pass may temporarily
// flip requires_grad through set_trainable().
struct BaseModel {
  ModelConfig config;
  TensorPtr embedding;   // (V,d)
  std::vector<Layer> layers;
  TensorPtr final_norm;  // (d)
  TensorPtr head;        // (d,V)

  std::vector<std::pair<std::string, TensorPtr>> named_tensors() const;
  int64_t param_count() const;
  uint64_t checksum() const;  // FNV over raw parameter bytes
  void set_trainable(bool on);
};

BaseModel init_base(const ModelConfig& config, uint64_t seed);

// Per-matrix adaptation callback. Invoked with the flattened (rows, d_in)
// input of every adapted matrix; returns the delta to add to x W0, or
// nullptr for none.
struct HookCtx {
  int64_t layer;
  MatrixSlot slot;
  int64_t batch;
  int64_t seq;  // rows = batch * seq
};
struct AdapterHook {
  virtual TensorPtr delta(const HookCtx& ctx, const TensorPtr& x) = 0;
  // Called as each layer begins, before any delta() of that layer, with the
  // hidden state entering the layer. Routing hooks read it to pick experts.
  virtual void on_layer_input(int64_t layer, const TensorPtr& layer_input,
                              const std::vector<int64_t>& lengths) {
    (void)layer;
    (void)layer_input;
    (void)lengths;
  }
  virtual ~AdapterHook() = default;
};

struct ForwardResult {
  TensorPtr logits;                    // (B,T,V)
  std::vector<TensorPtr> layer_inputs;  // hidden state entering each layer
};

// Pre-norm blocks: x += Wo attn(rms(x)); x += FFN(rms(x)); logits from the
// final norm. Causal; positions at or past lengths[b] produce no attention
// output. layer_inputs[l] feeds the layer-l router.
ForwardResult base_forward(const BaseModel& model, const IntMat& tokens,
                           const std::vector<int64_t>& lengths,
                           AdapterHook* hook = nullptr);

}  // namespace moa
