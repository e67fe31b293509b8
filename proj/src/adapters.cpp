#include "moa/adapters.hpp"

#include <algorithm>

#include "moa/autodiff.hpp"
#include "moa/ops.hpp"
#include "moa/rng.hpp"

namespace moa {

namespace {

std::pair<int64_t, int64_t> slot_dims(const ModelConfig& c, MatrixSlot s) {
  switch (s) {
    case MatrixSlot::kFfnUp: return {c.hidden_dim, c.ffn_dim};
    case MatrixSlot::kFfnDown: return {c.ffn_dim, c.hidden_dim};
    default: return {c.hidden_dim, c.hidden_dim};
  }
}

}  // namespace

std::vector<MatrixSlot> all_slots() {
  return {MatrixSlot::kQ, MatrixSlot::kK,     MatrixSlot::kV,
          MatrixSlot::kO, MatrixSlot::kFfnUp, MatrixSlot::kFfnDown};
}

const LoraMat* LoraExpert::mat(int64_t layer, MatrixSlot slot) const {
  auto it = std::find(slots.begin(), slots.end(), slot);
  if (it == slots.end()) return nullptr;
  return &mats[layer][it - slots.begin()];
}

std::vector<std::pair<std::string, TensorPtr>> LoraExpert::named_tensors()
    const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  for (size_t l = 0; l < mats.size(); l++) {
    for (size_t s = 0; s < slots.size(); s++) {
      auto base = strfmt("expert.%d.layer.%zu.%s.", domain_id, l,
                         slot_name(slots[s]));
      out.emplace_back(base + "A", mats[l][s].A);
      out.emplace_back(base + "B", mats[l][s].B);
    }
  }
  return out;
}

LoraExpert make_expert(const ModelConfig& config, int32_t domain_id,
                       int64_t rank, double scale,
                       const std::vector<MatrixSlot>& slots, uint64_t seed) {
  if (rank < 1) throw UsageError("lora rank must be >= 1");
  if (slots.empty()) throw UsageError("expert needs at least one slot");
  LoraExpert e;
  e.domain_id = domain_id;
  e.rank = rank;
  e.scale = scale;
  e.slots = slots;
  e.mats.resize(config.num_layers);
  for (int64_t l = 0; l < config.num_layers; l++) {
    for (MatrixSlot s : slots) {
      auto [din, dout] = slot_dims(config, s);
      auto name = strfmt("expert.%d.layer.%lld.%s", domain_id,
                         static_cast<long long>(l), slot_name(s));
      Rng rng = Rng::fork(seed, name);
      LoraMat m;
      // A is random so training has signal; B = 0 makes the initial delta
      // exactly zero.
      m.A = Tensor::gaussian(rng, {din, rank}, 0.0, 0.02, DType::kF32, true);
      m.B = Tensor::zeros({rank, dout}, DType::kF32, true);
      e.mats[l].push_back(std::move(m));
    }
  }
  return e;
}

TensorPtr lora_delta(const TensorPtr& x, const LoraMat& m, double scale) {
  auto low = ops::matmul(x, m.A);       // (rows, r)
  auto up = ops::matmul(low, m.B);      // (rows, d_out)
  return scale == 1.0 ? up : ops::scale(up, scale);
}

TensorPtr apply_expert(const TensorPtr& x, const TensorPtr& w0,
                       const LoraExpert& e, int64_t layer, MatrixSlot slot) {
  auto y = ops::matmul(x, w0);
  const LoraMat* m = e.mat(layer, slot);
  if (!m) return y;
  return ops::add(y, lora_delta(x, *m, e.scale));
}

std::vector<std::pair<std::string, TensorPtr>> RouterLayer::named_tensors(
    int64_t layer) const {
  auto base = strfmt("router.%lld.", static_cast<long long>(layer));
  if (mlp_hidden == 0) return {{base + "w", w}, {base + "b", b}};
  return {{base + "w1", w1},
          {base + "b1", b1},
          {base + "w2", w2},
          {base + "b2", b2}};
}

RouterLayer make_router(int64_t hidden_dim, int64_t n_experts,
                        int64_t mlp_hidden, uint64_t seed, int64_t layer) {
  if (hidden_dim < 1 || n_experts < 1 || mlp_hidden < 0)
    throw UsageError("bad router dimensions");
  RouterLayer r;
  r.mlp_hidden = mlp_hidden;
  auto tag = strfmt("router.%lld.", static_cast<long long>(layer));
  if (mlp_hidden == 0) {
    Rng rng = Rng::fork(seed, tag + "w");
    r.w = Tensor::gaussian(rng, {hidden_dim, n_experts}, 0.0, 0.02,
                           DType::kF32, true);
    r.b = Tensor::zeros({n_experts}, DType::kF32, true);
  } else {
    Rng r1 = Rng::fork(seed, tag + "w1");
    Rng r2 = Rng::fork(seed, tag + "w2");
    r.w1 = Tensor::gaussian(r1, {hidden_dim, mlp_hidden}, 0.0, 0.02,
                            DType::kF32, true);
    r.b1 = Tensor::zeros({mlp_hidden}, DType::kF32, true);
    r.w2 = Tensor::gaussian(r2, {mlp_hidden, n_experts}, 0.0, 0.02,
                            DType::kF32, true);
    r.b2 = Tensor::zeros({n_experts}, DType::kF32, true);
  }
  return r;
}

TensorPtr router_logits(const RouterLayer& router, const TensorPtr& layer_input,
                        const std::vector<int64_t>& lengths) {
  auto pooled = ops::mean_pool(layer_input, lengths);  // (B,d)
  if (router.mlp_hidden == 0)
    return ops::add(ops::matmul(pooled, router.w), router.b);
  auto h = ops::gelu(ops::add(ops::matmul(pooled, router.w1), router.b1));
  return ops::add(ops::matmul(h, router.w2), router.b2);
}

int64_t count_router_params(int64_t num_layers, int64_t hidden_dim,
                            int64_t n_experts, int64_t mlp_hidden) {
  if (num_layers < 1 || hidden_dim < 1 || n_experts < 1 || mlp_hidden < 0)
    throw UsageError("count_router_params: arguments must be positive");
  if (mlp_hidden == 0)
    return num_layers * (hidden_dim * n_experts + n_experts);
  return num_layers * (hidden_dim * mlp_hidden + mlp_hidden +
                       mlp_hidden * n_experts + n_experts);
}

void MoaModel::validate() const {
  if (static_cast<int64_t>(routers.size()) != base.config.num_layers)
    throw UsageError("need exactly one router per transformer layer");
  if (experts.size() < 2) throw UsageError("need at least 2 experts");
  if (eta < 0) throw UsageError("eta must be >= 0");
  for (size_t i = 0; i < experts.size(); i++)
    if (experts[i].domain_id != static_cast<int32_t>(i))
      throw UsageError("experts must be ordered by domain id");
}

std::vector<std::pair<std::string, TensorPtr>> MoaModel::adapter_tensors()
    const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  for (const auto& e : experts)
    for (auto& kv : e.named_tensors()) out.push_back(std::move(kv));
  for (size_t l = 0; l < routers.size(); l++)
    for (auto& kv : routers[l].named_tensors(static_cast<int64_t>(l)))
      out.push_back(std::move(kv));
  return out;
}

MoaModel make_moa(BaseModel base, int64_t n_experts, int64_t rank,
                  double scale, double eta, int64_t mlp_hidden,
                  const std::vector<MatrixSlot>& slots, uint64_t seed) {
  MoaModel m;
  m.base = std::move(base);
  m.eta = eta;
  for (int64_t i = 0; i < n_experts; i++)
    m.experts.push_back(make_expert(m.base.config, static_cast<int32_t>(i),
                                    rank, scale, slots,
                                    Rng::fork(seed, strfmt("expert%lld",
                                                           static_cast<long long>(i)))
                                        .next_u64()));
  for (int64_t l = 0; l < m.base.config.num_layers; l++)
    m.routers.push_back(make_router(m.base.config.hidden_dim, n_experts,
                                    mlp_hidden, seed, l));
  m.validate();
  return m;
}

// ------------------------------------------------------------------- hooks

TensorPtr SingleExpertHook::delta(const HookCtx& ctx, const TensorPtr& x) {
  const LoraMat* m = expert_->mat(ctx.layer, ctx.slot);
  if (!m) return nullptr;
  return lora_delta(x, *m, expert_->scale);
}

RoutedHook::RoutedHook(const std::vector<LoraExpert>* experts,
                       std::vector<int32_t> seq_expert)
    : experts_(experts), seq_expert_(std::move(seq_expert)) {
  for (int32_t e : seq_expert_)
    if (e < 0 || e >= static_cast<int32_t>(experts_->size()))
      throw UsageError(strfmt("expert index %d outside [0,%zu)", e,
                              experts_->size()));
}

TensorPtr RoutedHook::delta(const HookCtx& ctx, const TensorPtr& x) {
  int64_t rows = ctx.batch * ctx.seq;
  if (static_cast<int64_t>(seq_expert_.size()) != ctx.batch)
    throw UsageError("routing labels do not match the batch");
  if (grouped_rows_ != rows) {
    groups_.assign(experts_->size(), {});
    for (int64_t r = 0; r < rows; r++)
      groups_[seq_expert_[r / ctx.seq]].push_back(r);
    grouped_rows_ = rows;
  }
  if (!(*experts_)[0].mat(ctx.layer, ctx.slot)) return nullptr;
  std::vector<TensorPtr> pieces;
  std::vector<std::vector<int64_t>> used;
  for (size_t e = 0; e < groups_.size(); e++) {
    if (groups_[e].empty()) continue;
    auto xe = ops::gather_rows(x, groups_[e]);
    const auto& ex = (*experts_)[e];
    pieces.push_back(lora_delta(xe, *ex.mat(ctx.layer, ctx.slot), ex.scale));
    used.push_back(groups_[e]);
  }
  return ops::merge_rows(pieces, used, rows);
}

std::vector<std::pair<std::string, TensorPtr>> MoeGates::named_tensors()
    const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  for (size_t l = 0; l < w.size(); l++) {
    out.emplace_back(strfmt("gate.%zu.w", l), w[l]);
    out.emplace_back(strfmt("gate.%zu.b", l), b[l]);
  }
  return out;
}

MoeGates make_gates(const ModelConfig& config, int64_t n_experts,
                    uint64_t seed) {
  MoeGates g;
  for (int64_t l = 0; l < config.num_layers; l++) {
    Rng rng = Rng::fork(seed, strfmt("gate.%lld", static_cast<long long>(l)));
    // fixed random projection: top-1 selection is discrete, so no gradient
    // path exists and the gate is never trained
    g.w.push_back(Tensor::gaussian(rng, {config.hidden_dim, n_experts}, 0.0,
                                   0.02));
    g.b.push_back(Tensor::zeros({n_experts}));
  }
  return g;
}

GatedHook::GatedHook(const std::vector<LoraExpert>* experts,
                     const MoeGates* gates)
    : experts_(experts), gates_(gates) {}

void GatedHook::on_layer_input(int64_t layer, const TensorPtr& layer_input,
                               const std::vector<int64_t>& lengths) {
  (void)lengths;
  int64_t B = layer_input->shape[0], T = layer_input->shape[1];
  int64_t d = layer_input->shape[2];
  int64_t rows = B * T;
  int64_t N = static_cast<int64_t>(experts_->size());
  NoGradScope ng;
  auto flat = ops::reshape(layer_input, {rows, d});
  auto logits = ops::add(ops::matmul(flat, gates_->w[layer]), gates_->b[layer]);
  row_expert_.assign(rows, 0);
  groups_.assign(N, {});
  for (int64_t r = 0; r < rows; r++) {
    int32_t best = 0;
    for (int64_t e = 1; e < N; e++)
      if (logits->get(r * N + e) > logits->get(r * N + best))
        best = static_cast<int32_t>(e);
    row_expert_[r] = best;
    groups_[best].push_back(r);
  }
}

TensorPtr GatedHook::delta(const HookCtx& ctx, const TensorPtr& x) {
  if (row_expert_.empty())
    throw UsageError("gated hook used without a layer input");
  if (!(*experts_)[0].mat(ctx.layer, ctx.slot)) return nullptr;
  int64_t rows = ctx.batch * ctx.seq;
  std::vector<TensorPtr> pieces;
  std::vector<std::vector<int64_t>> used;
  for (size_t e = 0; e < groups_.size(); e++) {
    if (groups_[e].empty()) continue;
    auto xe = ops::gather_rows(x, groups_[e]);
    const auto& ex = (*experts_)[e];
    pieces.push_back(lora_delta(xe, *ex.mat(ctx.layer, ctx.slot), ex.scale));
    used.push_back(groups_[e]);
  }
  return ops::merge_rows(pieces, used, rows);
}

// --------------------------------------------------------------- training

namespace {

LmForward lm_from_logits(const TensorPtr& logits, const data::Batch& batch) {
  int64_t B = logits->shape[0], T = logits->shape[1], V = logits->shape[2];
  auto flat = ops::reshape(logits, {B * T, V});
  auto nll = ops::cross_entropy(flat, batch.targets.v);
  LmForward f;
  for (int32_t t : batch.targets.v) f.lm_count += t >= 0;
  if (f.lm_count == 0) throw UsageError("batch has no scored tokens");
  f.lm_sum = ops::sum(nll);
  f.lm_loss = ops::scale(f.lm_sum, 1.0 / static_cast<double>(f.lm_count));
  return f;
}

}  // namespace

LmForward lm_forward(const BaseModel& base, const data::Batch& batch,
                     AdapterHook* hook) {
  auto res = base_forward(base, batch.tokens, batch.lengths, hook);
  return lm_from_logits(res.logits, batch);
}

MoaForward moa_train_forward(const MoaModel& model, const data::Batch& batch) {
  model.validate();
  int64_t N = model.n_experts();
  for (int32_t lbl : batch.labels)
    if (lbl < 0 || lbl >= N)
      throw UsageError(strfmt("domain label %d outside [0,%lld)", lbl,
                              static_cast<long long>(N)));
  RoutedHook hook(&model.experts, batch.labels);
  auto res = base_forward(model.base, batch.tokens, batch.lengths, &hook);
  auto lm = lm_from_logits(res.logits, batch);

  MoaForward f;
  f.lm_sum = lm.lm_sum;
  f.lm_loss = lm.lm_loss;
  f.lm_count = lm.lm_count;
  int64_t B = batch.tokens.rows;
  int64_t L = model.base.config.num_layers;
  f.cls_count = L * B;
  auto compute_cls = [&]() {
    for (int64_t l = 0; l < L; l++) {
      auto rl = router_logits(model.routers[l], res.layer_inputs[l],
                              batch.lengths);
      f.router_logits.push_back(rl);
      auto s = ops::sum(ops::cross_entropy(rl, batch.labels));
      f.cls_sum = f.cls_sum ? ops::add(f.cls_sum, s) : s;
    }
  };
  if (model.eta == 0.0) {
    // reporting only: nothing reaches the tape, router grads stay absent
    NoGradScope ng;
    compute_cls();
  } else {
    compute_cls();
  }
  f.cls_loss = ops::scale(f.cls_sum, 1.0 / static_cast<double>(f.cls_count));
  f.total = model.eta == 0.0
                ? f.lm_loss
                : ops::add(f.lm_loss, ops::scale(f.cls_loss, model.eta));
  return f;
}

LmForward moe_gate_forward(const BaseModel& base,
                           const std::vector<LoraExpert>& experts,
                           const MoeGates& gates, const data::Batch& batch) {
  GatedHook hook(&experts, &gates);
  return lm_forward(base, batch, &hook);
}

// --------------------------------------------------------------- selection

namespace {

class ProgressiveRoutingHook : public AdapterHook {
 public:
  ProgressiveRoutingHook(const MoaModel* model) : model_(model) {}

  void on_layer_input(int64_t layer, const TensorPtr& layer_input,
                      const std::vector<int64_t>& lengths) override {
    auto rl = router_logits(model_->routers[layer], layer_input, lengths);
    int64_t N = model_->n_experts();
    int32_t best = 0;
    for (int64_t e = 1; e < N; e++)
      if (rl->get(e) > rl->get(best)) best = static_cast<int32_t>(e);
    votes.push_back(best);
    auto p = ops::softmax(rl);
    std::vector<double> row(N);
    for (int64_t e = 0; e < N; e++) row[e] = p->get(e);
    probs.push_back(std::move(row));
    current_ = best;
  }

  TensorPtr delta(const HookCtx& ctx, const TensorPtr& x) override {
    const auto& ex = model_->experts[current_];
    const LoraMat* m = ex.mat(ctx.layer, ctx.slot);
    if (!m) return nullptr;
    return lora_delta(x, *m, ex.scale);
  }

  std::vector<int32_t> votes;
  std::vector<std::vector<double>> probs;

 private:
  const MoaModel* model_;
  int32_t current_ = 0;
};

}  // namespace

Selection select_expert(const MoaModel& model,
                        const std::vector<int32_t>& prompt_tokens,
                        SelectKind kind, int32_t oracle_label) {
  model.validate();
  if (kind == SelectKind::kOracle) {
    if (oracle_label < 0 || oracle_label >= model.n_experts())
      throw UsageError("oracle selection needs a valid domain label");
    Selection s;
    s.expert = oracle_label;
    return s;
  }
  if (prompt_tokens.empty()) throw UsageError("empty prompt");
  int64_t n = static_cast<int64_t>(prompt_tokens.size()) + 2;
  IntMat tokens(1, n);
  tokens.at(0, 0) = data::kBos;
  for (size_t i = 0; i < prompt_tokens.size(); i++)
    tokens.at(0, static_cast<int64_t>(i) + 1) = prompt_tokens[i];
  tokens.at(0, n - 1) = data::kSep;

  NoGradScope ng;
  ProgressiveRoutingHook hook(&model);
  base_forward(model.base, tokens, {n}, &hook);

  Selection s;
  s.votes = hook.votes;
  s.probs = hook.probs;
  if (kind == SelectKind::kLast) {
    s.expert = s.votes.back();
    return s;
  }
  int64_t N = model.n_experts();
  std::vector<int64_t> counts(N, 0);
  for (int32_t v : s.votes) counts[v]++;
  std::vector<double> sump(N, 0.0);
  for (const auto& p : s.probs)
    for (int64_t e = 0; e < N; e++) sump[e] += p[e];
  int32_t best = 0;
  for (int32_t e = 1; e < N; e++)
    if (counts[e] > counts[best] ||
        (counts[e] == counts[best] && sump[e] > sump[best]))
      best = e;
  s.expert = best;
  return s;
}

// -------------------------------------------------------------- classifier

std::vector<std::pair<std::string, TensorPtr>>
DomainClassifier::named_tensors() const {
  return {{"classifier.embed", embed},
          {"classifier.w", w},
          {"classifier.b", b}};
}

DomainClassifier make_classifier(int64_t vocab, int64_t embed_dim,
                                 int64_t n_classes, uint64_t seed) {
  if (vocab < 1 || embed_dim < 1 || n_classes < 1)
    throw UsageError("bad classifier dimensions");
  DomainClassifier c;
  Rng re = Rng::fork(seed, "classifier.embed");
  Rng rw = Rng::fork(seed, "classifier.w");
  c.embed =
      Tensor::gaussian(re, {vocab, embed_dim}, 0.0, 0.02, DType::kF32, true);
  c.w = Tensor::gaussian(rw, {embed_dim, n_classes}, 0.0, 0.02, DType::kF32,
                         true);
  c.b = Tensor::zeros({n_classes}, DType::kF32, true);
  return c;
}

TensorPtr classifier_logits(const DomainClassifier& clf,
                            const std::vector<std::vector<int32_t>>& prompts) {
  if (prompts.empty()) throw UsageError("empty prompt batch");
  int64_t B = static_cast<int64_t>(prompts.size());
  int64_t T = 0;
  for (const auto& p : prompts) {
    if (p.empty()) throw UsageError("empty prompt");
    T = std::max(T, static_cast<int64_t>(p.size()));
  }
  IntMat mat(B, T, 0);  // filler rows beyond each length are never pooled
  std::vector<int64_t> lengths(B);
  for (int64_t b = 0; b < B; b++) {
    for (size_t i = 0; i < prompts[b].size(); i++)
      mat.at(b, static_cast<int64_t>(i)) = prompts[b][i];
    lengths[b] = static_cast<int64_t>(prompts[b].size());
  }
  auto emb = ops::embedding_lookup(clf.embed, mat);
  auto pooled = ops::mean_pool(emb, lengths);
  return ops::add(ops::matmul(pooled, clf.w), clf.b);
}

int32_t classifier_select(const DomainClassifier& clf,
                          const std::vector<int32_t>& prompt) {
  NoGradScope ng;
  auto logits = classifier_logits(clf, {prompt});
  int64_t N = logits->dim(-1);
  int32_t best = 0;
  for (int64_t e = 1; e < N; e++)
    if (logits->get(e) > logits->get(best)) best = static_cast<int32_t>(e);
  return best;
}

}  // namespace moa
