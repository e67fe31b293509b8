#include "moa/model.hpp"

#include "moa/ops.hpp"
#include "moa/rng.hpp"

namespace moa {

void ModelConfig::validate() const {
  if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 ||
      vocab_size < 1)
    throw UsageError("model config: all dimensions must be >= 1");
  if (hidden_dim % num_heads != 0)
    throw UsageError(
        strfmt("model config: hidden_dim %lld not divisible by %lld heads",
               static_cast<long long>(hidden_dim),
               static_cast<long long>(num_heads)));
  if ((hidden_dim / num_heads) % 2 != 0)
    throw UsageError("model config: head dim must be even for rotation");
  if (max_seq_len < 2) throw UsageError("model config: max_seq_len < 2");
}

const char* slot_name(MatrixSlot slot) {
  switch (slot) {
    case MatrixSlot::kQ: return "q";
    case MatrixSlot::kK: return "k";
    case MatrixSlot::kV: return "v";
    case MatrixSlot::kO: return "o";
    case MatrixSlot::kFfnUp: return "ffn_up";
    case MatrixSlot::kFfnDown: return "ffn_down";
  }
  return "?";
}

std::vector<std::pair<std::string, TensorPtr>> BaseModel::named_tensors()
    const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("embed", embedding);
  for (size_t i = 0; i < layers.size(); i++) {
    const Layer& l = layers[i];
    auto base = strfmt("layer.%zu.", i);
    out.emplace_back(base + "wq", l.wq);
    out.emplace_back(base + "wk", l.wk);
    out.emplace_back(base + "wv", l.wv);
    out.emplace_back(base + "wo", l.wo);
    out.emplace_back(base + "ffn_up", l.ffn_up);
    out.emplace_back(base + "ffn_down", l.ffn_down);
    out.emplace_back(base + "attn_norm", l.attn_norm);
    out.emplace_back(base + "ffn_norm", l.ffn_norm);
  }
  out.emplace_back("final_norm", final_norm);
  out.emplace_back("head", head);
  return out;
}

int64_t BaseModel::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_tensors()) n += t->numel();
  return n;
}

uint64_t BaseModel::checksum() const {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : named_tensors()) {
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(t->f32.data());
    for (size_t i = 0; i < t->f32.size() * sizeof(float); i++) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

void BaseModel::set_trainable(bool on) {
  for (const auto& [name, t] : named_tensors()) {
    t->requires_grad = on;
    if (!on) t->grad.reset();
  }
}

BaseModel init_base(const ModelConfig& config, uint64_t seed) {
  config.validate();
  BaseModel m;
  m.config = config;
  const int64_t d = config.hidden_dim, f = config.ffn_dim,
                v = config.vocab_size;
  auto gauss = [&](const std::string& name, std::vector<int64_t> shape) {
    Rng rng = Rng::fork(seed, "base/" + name);
    return Tensor::gaussian(rng, std::move(shape), 0.0, 0.02);
  };
  m.embedding = gauss("embed", {v, d});
  for (int64_t i = 0; i < config.num_layers; i++) {
    Layer l;
    auto base = strfmt("layer.%lld.", static_cast<long long>(i));
    l.wq = gauss(base + "wq", {d, d});
    l.wk = gauss(base + "wk", {d, d});
    l.wv = gauss(base + "wv", {d, d});
    l.wo = gauss(base + "wo", {d, d});
    l.ffn_up = gauss(base + "ffn_up", {d, f});
    l.ffn_down = gauss(base + "ffn_down", {f, d});
    l.attn_norm = Tensor::full({d}, 1.0);
    l.ffn_norm = Tensor::full({d}, 1.0);
    m.layers.push_back(std::move(l));
  }
  m.final_norm = Tensor::full({d}, 1.0);
  m.head = gauss("head", {d, v});
  // frozen from the start; only adapters and routers learn
  m.set_trainable(false);
  return m;
}

namespace {

TensorPtr apply_matrix(const TensorPtr& x_flat, const TensorPtr& w,
                       AdapterHook* hook, const HookCtx& ctx) {
  TensorPtr y = ops::matmul(x_flat, w);
  if (hook) {
    TensorPtr delta = hook->delta(ctx, x_flat);
    if (delta) y = ops::add(y, delta);
  }
  return y;
}

}  // namespace

ForwardResult base_forward(const BaseModel& model, const IntMat& tokens,
                           const std::vector<int64_t>& lengths,
                           AdapterHook* hook) {
  const auto& cfg = model.config;
  const int64_t B = tokens.rows, T = tokens.cols, d = cfg.hidden_dim;
  if (B < 1 || T < 1) throw UsageError("base_forward: empty token batch");
  if (T > cfg.max_seq_len)
    throw UsageError(strfmt("base_forward: sequence length %lld exceeds %lld",
                            static_cast<long long>(T),
                            static_cast<long long>(cfg.max_seq_len)));
  if (static_cast<int64_t>(lengths.size()) != B)
    throw UsageError("base_forward: lengths size mismatch");
  for (int64_t len : lengths)
    if (len < 1 || len > T)
      throw UsageError("base_forward: length outside [1, seq]");

  ForwardResult res;
  TensorPtr x = ops::embedding_lookup(model.embedding, tokens);  // (B,T,d)
  for (int64_t li = 0; li < cfg.num_layers; li++) {
    const Layer& l = model.layers[li];
    res.layer_inputs.push_back(x);
    if (hook) hook->on_layer_input(li, x, lengths);
    auto h = ops::reshape(ops::rms_norm(x, l.attn_norm), {B * T, d});
    auto q = apply_matrix(h, l.wq, hook, {li, MatrixSlot::kQ, B, T});
    auto k = apply_matrix(h, l.wk, hook, {li, MatrixSlot::kK, B, T});
    auto v = apply_matrix(h, l.wv, hook, {li, MatrixSlot::kV, B, T});
    auto att = ops::attention(ops::reshape(q, {B, T, d}),
                              ops::reshape(k, {B, T, d}),
                              ops::reshape(v, {B, T, d}), cfg.num_heads,
                              lengths, cfg.rope_base());
    auto att_flat = ops::reshape(att, {B * T, d});
    auto att_out =
        apply_matrix(att_flat, l.wo, hook, {li, MatrixSlot::kO, B, T});
    x = ops::add(x, ops::reshape(att_out, {B, T, d}));

    auto h2 = ops::reshape(ops::rms_norm(x, l.ffn_norm), {B * T, d});
    auto up = ops::gelu(
        apply_matrix(h2, l.ffn_up, hook, {li, MatrixSlot::kFfnUp, B, T}));
    auto down =
        apply_matrix(up, l.ffn_down, hook, {li, MatrixSlot::kFfnDown, B, T});
    x = ops::add(x, ops::reshape(down, {B, T, d}));
  }
  auto xn = ops::rms_norm(x, model.final_norm);
  res.logits = ops::matmul(xn, model.head);  // (B,T,V)
  return res;
}

}  // namespace moa
