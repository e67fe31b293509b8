#include "moa/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <utility>

#include <json.hpp>

#include "moa/autodiff.hpp"
#include "moa/kernels.hpp"
#include "moa/ops.hpp"
#include "moa/rng.hpp"

namespace moa {

using nlohmann::ordered_json;

void TrainConfig::validate() const {
  if (total_steps < 0) throw UsageError("total_steps must be >= 0");
  if (peak_lr <= 0) throw UsageError("peak_lr must be positive");
  if (warmup_fraction <= 0 || warmup_fraction >= 1)
    throw UsageError("warmup_fraction must lie strictly between 0 and 1");
  if (clip_norm <= 0) throw UsageError("clip_norm must be positive");
  if (accum_steps < 1) throw UsageError("accum_steps must be >= 1");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (eta < 0) throw UsageError("eta must be >= 0");
  if (weight_decay < 0) throw UsageError("weight_decay must be >= 0");
  if (eval_interval < 0) throw UsageError("eval_interval must be >= 0");
}

int64_t TrainConfig::warmup_steps() const {
  int64_t w = static_cast<int64_t>(std::llround(warmup_fraction *
                                                static_cast<double>(total_steps)));
  int64_t hi = std::max<int64_t>(1, total_steps - 1);
  return std::clamp<int64_t>(w, 1, hi);
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw UsageError(strfmt("lr step %lld outside [0,%lld]",
                            static_cast<long long>(step),
                            static_cast<long long>(cfg.total_steps)));
  if (cfg.total_steps == 0) return 0.0;
  int64_t w = cfg.warmup_steps();
  if (step <= w)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  double progress = static_cast<double>(step - w) /
                    static_cast<double>(cfg.total_steps - w);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double global_grad_norm(const std::vector<TensorPtr>& params) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p->grad) continue;
    int64_t n = p->numel();
    if (p->dtype == DType::kF32)
      ss += kern::f32().sumsq(p->grad->d32(), n);
    else
      ss += kern::f64().sumsq(p->grad->d64(), n);
  }
  return std::sqrt(ss);
}

double clip_gradients(const std::vector<TensorPtr>& params, double max_norm) {
  if (max_norm <= 0) throw UsageError("max_norm must be positive");
  double norm = global_grad_norm(params);
  if (!std::isfinite(norm))
    throw NumericalError(strfmt("non-finite gradient norm %g", norm));
  if (norm <= max_norm) return 1.0;
  double s = max_norm / norm;
  for (const auto& p : params) {
    if (!p->grad) continue;
    int64_t n = p->numel();
    if (p->dtype == DType::kF32)
      kern::f32().scale(p->grad->d32(), p->grad->d32(),
                        static_cast<float>(s), n);
    else
      kern::f64().scale(p->grad->d64(), p->grad->d64(), s, n);
  }
  return s;
}

AdamW::AdamW(const std::vector<TensorPtr>& params, double weight_decay,
             double beta1, double beta2, double eps)
    : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    if (!p->requires_grad) continue;  // no state for frozen tensors
    params_.push_back(p);
    Slot s;
    if (p->dtype == DType::kF32) {
      s.m32.assign(static_cast<size_t>(p->numel()), 0.0f);
      s.v32.assign(static_cast<size_t>(p->numel()), 0.0f);
    } else {
      s.m64.assign(static_cast<size_t>(p->numel()), 0.0);
      s.v64.assign(static_cast<size_t>(p->numel()), 0.0);
    }
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(double lr) {
  t_++;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); i++) {
    auto& p = params_[i];
    if (!p->grad) continue;
    int64_t n = p->numel();
    if (p->grad->numel() != n)
      throw UsageError("gradient shape does not match its parameter");
    if (p->dtype == DType::kF32) {
      kern::f32().adamw(p->d32(), p->grad->d32(), slots_[i].m32.data(),
                        slots_[i].v32.data(), n, static_cast<float>(lr),
                        static_cast<float>(beta1_), static_cast<float>(beta2_),
                        static_cast<float>(eps_), static_cast<float>(wd_),
                        static_cast<float>(bc1), static_cast<float>(bc2));
    } else {
      kern::f64().adamw(p->d64(), p->grad->d64(), slots_[i].m64.data(),
                        slots_[i].v64.data(), n, lr, beta1_, beta2_, eps_, wd_,
                        bc1, bc2);
    }
  }
}

void AdamW::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

std::vector<MatrixSlot> AdapterSpec::resolved_slots() const {
  return slots.empty() ? all_slots() : slots;
}

// ------------------------------------------------------------- internals

namespace {

uint64_t expert_seed(uint64_t seed, int32_t domain_id) {
  return Rng::fork(seed, strfmt("expert.%d", domain_id)).next_u64();
}

// Copying a LoraExpert shares its TensorPtrs, so a trainer that adopted a
// caller's expert would silently keep training the caller's tensors. Detach
// into private storage before any in-place update.
LoraExpert detach_expert(LoraExpert e) {
  for (auto& layer : e.mats)
    for (auto& m : layer) {
      if (m.A) {
        m.A = std::make_shared<Tensor>(*m.A);
        m.A->grad = nullptr;
      }
      if (m.B) {
        m.B = std::make_shared<Tensor>(*m.B);
        m.B->grad = nullptr;
      }
    }
  return e;
}

// Cycles epochs of the even-sampling schedule for as long as the trainer
// asks for batches. One domain degenerates to plain shuffled epochs.
class PickStream {
 public:
  PickStream(std::vector<int64_t> sizes, int64_t batch_size, uint64_t seed)
      : sizes_(std::move(sizes)), bs_(batch_size), seed_(seed) {}

  const std::vector<std::pair<int32_t, int64_t>>& next() {
    if (cur_ >= batches_.size()) {
      uint64_t es =
          Rng::fork(seed_, strfmt("epoch.%lld", static_cast<long long>(epoch_)))
              .next_u64();
      batches_ = data::even_sample_schedule(sizes_, bs_, es);
      epoch_++;
      cur_ = 0;
    }
    return batches_[cur_++];
  }

 private:
  std::vector<int64_t> sizes_;
  int64_t bs_;
  uint64_t seed_;
  int64_t epoch_ = 0;
  std::vector<std::vector<std::pair<int32_t, int64_t>>> batches_;
  size_t cur_ = 0;
};

class MetricsSink {
 public:
  MetricsSink(const std::string& path, std::vector<std::string>* rows)
      : rows_(rows) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) throw DataError("cannot write metrics file: " + path);
  }
  void push(const ordered_json& j) {
    auto s = j.dump();
    if (out_.is_open()) out_ << s << "\n" << std::flush;
    rows_->push_back(std::move(s));
  }

 private:
  std::ofstream out_;
  std::vector<std::string>* rows_;
};

std::vector<int64_t> train_sizes(const std::vector<DomainData>& domains) {
  std::vector<int64_t> sizes;
  for (const auto& d : domains) {
    if (d.train.empty()) throw UsageError("every domain needs training records");
    sizes.push_back(static_cast<int64_t>(d.train.size()));
  }
  return sizes;
}

std::vector<std::vector<data::EncodedRecord>> train_views(
    const std::vector<DomainData>& domains) {
  std::vector<std::vector<data::EncodedRecord>> v;
  for (const auto& d : domains) v.push_back(d.train);
  return v;
}

int64_t scored_tokens(const data::Batch& b) {
  int64_t n = 0;
  for (int32_t t : b.targets.v) n += t >= 0;
  return n;
}

// Mean NLL exponentiated over a record list, chunked in listed order.
// make_hook(batch) returns the adaptation for each chunk (may be null).
template <class HookFn>
double eval_ppl(const BaseModel& base,
                const std::vector<data::EncodedRecord>& recs,
                data::MaskMode mode, int64_t bs, HookFn&& make_hook) {
  NoGradScope ng;
  double sum = 0;
  int64_t count = 0;
  for (size_t at = 0; at < recs.size(); at += static_cast<size_t>(bs)) {
    std::vector<data::EncodedRecord> chunk(
        recs.begin() + static_cast<int64_t>(at),
        recs.begin() +
            std::min(recs.size(), at + static_cast<size_t>(bs)));
    auto batch = data::make_batch(chunk, mode);
    auto hook = make_hook(batch);
    auto f = lm_forward(base, batch, hook.get());
    sum += f.lm_sum->item();
    count += f.lm_count;
  }
  if (count == 0) throw UsageError("perplexity over zero scored tokens");
  return std::exp(sum / static_cast<double>(count));
}

// Per-layer fraction of validation sequences whose router argmax equals the
// domain label, measured on teacher-forced states.
std::vector<double> router_accuracy(const MoaModel& m,
                                    const std::vector<DomainData>& domains,
                                    data::MaskMode mode, int64_t bs) {
  NoGradScope ng;
  int64_t L = m.base.config.num_layers;
  std::vector<int64_t> hit(L, 0);
  int64_t total = 0;
  for (const auto& dom : domains) {
    const auto& recs = dom.val;
    for (size_t at = 0; at < recs.size(); at += static_cast<size_t>(bs)) {
      std::vector<data::EncodedRecord> chunk(
          recs.begin() + static_cast<int64_t>(at),
          recs.begin() +
              std::min(recs.size(), at + static_cast<size_t>(bs)));
      auto batch = data::make_batch(chunk, mode);
      RoutedHook hook(&m.experts, batch.labels);
      auto res = base_forward(m.base, batch.tokens, batch.lengths, &hook);
      int64_t B = batch.tokens.rows;
      int64_t N = m.n_experts();
      for (int64_t l = 0; l < L; l++) {
        auto logits =
            router_logits(m.routers[l], res.layer_inputs[l], batch.lengths);
        for (int64_t b = 0; b < B; b++) {
          int64_t arg = 0;
          for (int64_t e = 1; e < N; e++)
            if (logits->get(b * N + e) > logits->get(b * N + arg)) arg = e;
          hit[l] += arg == batch.labels[b];
        }
      }
      total += B;
    }
  }
  std::vector<double> acc(L, 0.0);
  if (total > 0)
    for (int64_t l = 0; l < L; l++)
      acc[l] = static_cast<double>(hit[l]) / static_cast<double>(total);
  return acc;
}

struct WindowStats {
  double loss = 0, lm = 0, cls = 0;
};

// One optimizer step over accum_steps micro-batches. forward(batch) must
// run under the caller-established tape and return the graph nodes; the
// objective is assembled here so that the accumulated gradient equals the
// gradient of the single concatenated batch exactly (sum forms scaled by
// the window-wide token counts).
template <class ForwardFn>
WindowStats run_window(const std::vector<data::Batch>& window, AdamW& opt,
                       double lr, const TrainConfig& cfg, double eta,
                       int64_t layers, ForwardFn&& forward) {
  int64_t lm_total = 0, cls_total = 0;
  for (const auto& b : window) {
    lm_total += scored_tokens(b);
    cls_total += layers * b.tokens.rows;
  }
  if (lm_total == 0) throw UsageError("window holds no scored tokens");

  WindowStats st;
  opt.zero_grads();
  for (const auto& b : window) {
    TapeScope ts;
    MoaForward f = forward(b);
    TensorPtr objective =
        ops::scale(f.lm_sum, 1.0 / static_cast<double>(lm_total));
    if (f.cls_sum && eta > 0)
      objective = ops::add(
          objective,
          ops::scale(f.cls_sum, eta / static_cast<double>(cls_total)));
    ts.tape().backward(objective);
    st.lm += f.lm_sum->item();
    if (f.cls_sum) st.cls += f.cls_sum->item();
  }
  st.lm /= static_cast<double>(lm_total);
  st.cls = cls_total > 0 ? st.cls / static_cast<double>(cls_total) : 0.0;
  st.loss = st.lm + eta * st.cls;
  clip_gradients(opt.params(), cfg.clip_norm);
  opt.step(lr);
  return st;
}

bool eval_due(const TrainConfig& cfg, int64_t step) {
  if (step + 1 == cfg.total_steps) return true;
  return cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
}

}  // namespace

// -------------------------------------------------------------- warm-up

WarmupResult warmup_base(BaseModel& base,
                         const std::vector<DomainData>& domains,
                         const TrainConfig& cfg) {
  cfg.validate();
  auto sizes = train_sizes(domains);
  auto views = train_views(domains);

  // restore the frozen contract even if a divergence guard fires
  struct Refreeze {
    BaseModel* m;
    ~Refreeze() { m->set_trainable(false); }
  } guard{&base};
  base.set_trainable(true);

  std::vector<TensorPtr> params;
  for (auto& [name, t] : base.named_tensors()) params.push_back(t);
  AdamW opt(params, cfg.weight_decay);
  PickStream stream(sizes, cfg.batch_size, cfg.seed);

  WarmupResult out;
  MetricsSink sink(cfg.metrics_path, &out.metrics);
  for (int64_t step = 0; step < cfg.total_steps; step++) {
    std::vector<data::Batch> window;
    for (int64_t a = 0; a < cfg.accum_steps; a++)
      window.push_back(
          data::gather_batch(views, stream.next(), cfg.loss_mask_mode));
    double lr = lr_at(step, cfg);
    auto st = run_window(window, opt, lr, cfg, 0.0, 0, [&](const auto& b) {
      auto lm = lm_forward(base, b, nullptr);
      MoaForward f;
      f.lm_sum = lm.lm_sum;
      f.lm_loss = lm.lm_loss;
      f.lm_count = lm.lm_count;
      return f;
    });
    if (!std::isfinite(st.loss))
      throw NumericalError(strfmt("non-finite loss at warm-up step %lld",
                                  static_cast<long long>(step + 1)));
    out.loss_curve.push_back(st.loss);
    if (eval_due(cfg, step)) {
      ordered_json row;
      row["stage"] = "warmup";
      row["step"] = step + 1;
      row["lr"] = lr;
      row["loss"] = st.loss;
      ordered_json ppl = ordered_json::object();
      for (size_t d = 0; d < domains.size(); d++)
        if (!domains[d].val.empty())
          ppl[std::to_string(d)] = eval_ppl(
              base, domains[d].val, cfg.loss_mask_mode, cfg.batch_size,
              [](const data::Batch&) { return std::unique_ptr<AdapterHook>(); });
      row["val_ppl"] = ppl;
      sink.push(row);
    }
  }
  return out;
}

// -------------------------------------------------------------- stage 1

ExpertTrainResult train_expert(const BaseModel& base, int32_t domain_id,
                               const DomainData& data, const AdapterSpec& spec,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw UsageError("stage 1 needs training records");

  ExpertTrainResult out;
  out.expert = make_expert(base.config, domain_id, spec.rank, spec.scale,
                           spec.resolved_slots(),
                           expert_seed(cfg.seed, domain_id));
  std::vector<TensorPtr> params;
  for (auto& [name, t] : out.expert.named_tensors()) params.push_back(t);
  AdamW opt(params, cfg.weight_decay);

  std::vector<std::vector<data::EncodedRecord>> views = {data.train};
  PickStream stream({static_cast<int64_t>(data.train.size())}, cfg.batch_size,
                    cfg.seed);
  SingleExpertHook hook(&out.expert);

  MetricsSink sink(cfg.metrics_path, &out.metrics);
  for (int64_t step = 0; step < cfg.total_steps; step++) {
    std::vector<data::Batch> window;
    for (int64_t a = 0; a < cfg.accum_steps; a++)
      window.push_back(
          data::gather_batch(views, stream.next(), cfg.loss_mask_mode));
    double lr = lr_at(step, cfg);
    auto st = run_window(window, opt, lr, cfg, 0.0, 0, [&](const auto& b) {
      auto lm = lm_forward(base, b, &hook);
      MoaForward f;
      f.lm_sum = lm.lm_sum;
      f.lm_loss = lm.lm_loss;
      f.lm_count = lm.lm_count;
      return f;
    });
    if (!std::isfinite(st.loss))
      throw NumericalError(
          strfmt("non-finite loss training expert %d at step %lld", domain_id,
                 static_cast<long long>(step + 1)));
    out.loss_curve.push_back(st.loss);
    if (eval_due(cfg, step)) {
      ordered_json row;
      row["stage"] = "expert";
      row["domain"] = domain_id;
      row["step"] = step + 1;
      row["lr"] = lr;
      row["loss"] = st.loss;
      if (!data.val.empty())
        row["val_ppl"] = eval_ppl(
            base, data.val, cfg.loss_mask_mode, cfg.batch_size,
            [&](const data::Batch&) {
              return std::make_unique<SingleExpertHook>(&out.expert);
            });
      sink.push(row);
    }
  }
  return out;
}

// -------------------------------------------------------------- stage 2

MoaTrainResult train_moa(BaseModel base, std::vector<LoraExpert> experts,
                         const std::vector<DomainData>& domains,
                         const AdapterSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  if (experts.size() != domains.size())
    throw UsageError(strfmt("%zu experts for %zu domains", experts.size(),
                            domains.size()));
  auto sizes = train_sizes(domains);
  auto views = train_views(domains);

  for (auto& e : experts) e = detach_expert(std::move(e));
  MoaTrainResult out{MoaModel{std::move(base), std::move(experts), {},
                              cfg.eta},
                     {}, {}, {}, {}};
  int64_t L = out.model.base.config.num_layers;
  for (int64_t l = 0; l < L; l++)
    out.model.routers.push_back(
        make_router(out.model.base.config.hidden_dim, out.model.n_experts(),
                    spec.mlp_hidden, cfg.seed, l));
  out.model.validate();

  std::vector<TensorPtr> params;
  for (auto& [name, t] : out.model.adapter_tensors()) params.push_back(t);
  AdamW opt(params, cfg.weight_decay);
  PickStream stream(sizes, cfg.batch_size, cfg.seed);

  MetricsSink sink(cfg.metrics_path, &out.metrics);
  for (int64_t step = 0; step < cfg.total_steps; step++) {
    std::vector<data::Batch> window;
    for (int64_t a = 0; a < cfg.accum_steps; a++)
      window.push_back(
          data::gather_batch(views, stream.next(), cfg.loss_mask_mode));
    double lr = lr_at(step, cfg);
    auto st = run_window(
        window, opt, lr, cfg, cfg.eta, L,
        [&](const auto& b) { return moa_train_forward(out.model, b); });
    if (!std::isfinite(st.loss))
      throw NumericalError(strfmt("non-finite loss in joint stage at step %lld",
                                  static_cast<long long>(step + 1)));
    out.loss_curve.push_back(st.loss);
    out.lm_curve.push_back(st.lm);
    out.cls_curve.push_back(st.cls);
    if (eval_due(cfg, step)) {
      ordered_json row;
      row["stage"] = "joint";
      row["step"] = step + 1;
      row["lr"] = lr;
      row["loss"] = st.loss;
      row["lm_loss"] = st.lm;
      row["cls_loss"] = st.cls;
      ordered_json ppl = ordered_json::object();
      for (size_t d = 0; d < domains.size(); d++)
        if (!domains[d].val.empty())
          ppl[std::to_string(d)] = eval_ppl(
              out.model.base, domains[d].val, cfg.loss_mask_mode,
              cfg.batch_size, [&](const data::Batch& b) {
                return std::make_unique<RoutedHook>(&out.model.experts,
                                                    b.labels);
              });
      row["val_ppl"] = ppl;
      auto acc = router_accuracy(out.model, domains, cfg.loss_mask_mode,
                                 cfg.batch_size);
      row["router_acc"] = acc;
      double mean = 0;
      for (double a : acc) mean += a;
      row["router_acc_mean"] = acc.empty() ? 0.0 : mean / double(acc.size());
      sink.push(row);
    }
  }
  return out;
}

// ------------------------------------------------------------- baselines

BaselineResult train_baseline(BaselineKind kind, const BaseModel& base,
                              const std::vector<LoraExpert>& stage1,
                              const std::vector<DomainData>& domains,
                              const AdapterSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  auto sizes = train_sizes(domains);
  auto views = train_views(domains);
  int32_t n_domains = static_cast<int32_t>(domains.size());

  BaselineResult out;
  out.kind = kind;
  MetricsSink sink(cfg.metrics_path, &out.metrics);

  std::vector<TensorPtr> params;
  std::unique_ptr<GatedHook> gated;
  if (kind == BaselineKind::kSingleMixed) {
    out.mixed = make_expert(base.config, 0, spec.rank, spec.scale,
                            spec.resolved_slots(), expert_seed(cfg.seed, 0));
    for (auto& [name, t] : out.mixed.named_tensors()) params.push_back(t);
  } else if (kind == BaselineKind::kMoeLora ||
             kind == BaselineKind::kMoeLoraNaive) {
    if (kind == BaselineKind::kMoeLora) {
      if (static_cast<int32_t>(stage1.size()) != n_domains)
        throw UsageError("token-gated baseline needs one stage-1 expert per domain");
      for (const auto& e : stage1) out.experts.push_back(detach_expert(e));
    } else {
      for (int32_t d = 0; d < n_domains; d++)
        out.experts.push_back(make_expert(base.config, d, spec.rank,
                                          spec.scale, spec.resolved_slots(),
                                          expert_seed(cfg.seed, d)));
    }
    out.gates = make_gates(base.config, n_domains,
                           Rng::fork(cfg.seed, "gates").next_u64());
    for (auto& e : out.experts)
      for (auto& [name, t] : e.named_tensors()) params.push_back(t);
    gated = std::make_unique<GatedHook>(&out.experts, &out.gates);
  } else {
    out.classifier =
        make_classifier(base.config.vocab_size, spec.cls_embed, n_domains,
                        Rng::fork(cfg.seed, "classifier").next_u64());
    for (auto& [name, t] : out.classifier.named_tensors())
      params.push_back(t);
  }
  AdamW opt(params, cfg.weight_decay);
  PickStream stream(sizes, cfg.batch_size, cfg.seed);

  for (int64_t step = 0; step < cfg.total_steps; step++) {
    double lr = lr_at(step, cfg);
    WindowStats st;

    if (kind == BaselineKind::kClassifier) {
      // prompt stream only; window-normalized CE over domain labels
      std::vector<std::vector<std::pair<int32_t, int64_t>>> picks;
      int64_t rows_total = 0;
      for (int64_t a = 0; a < cfg.accum_steps; a++) {
        picks.push_back(stream.next());
        rows_total += static_cast<int64_t>(picks.back().size());
      }
      opt.zero_grads();
      for (const auto& pk : picks) {
        std::vector<std::vector<int32_t>> prompts;
        std::vector<int32_t> labels;
        for (auto [d, i] : pk) {
          prompts.push_back(domains[d].train[i].prompt);
          labels.push_back(d);
        }
        TapeScope ts;
        auto logits = classifier_logits(out.classifier, prompts);
        auto ce_sum = ops::sum(ops::cross_entropy(logits, labels));
        auto objective =
            ops::scale(ce_sum, 1.0 / static_cast<double>(rows_total));
        ts.tape().backward(objective);
        st.loss += ce_sum->item();
      }
      st.loss /= static_cast<double>(rows_total);
      clip_gradients(opt.params(), cfg.clip_norm);
      opt.step(lr);
    } else {
      std::vector<data::Batch> window;
      for (int64_t a = 0; a < cfg.accum_steps; a++)
        window.push_back(
            data::gather_batch(views, stream.next(), cfg.loss_mask_mode));
      st = run_window(window, opt, lr, cfg, 0.0, 0, [&](const auto& b) {
        AdapterHook* hook;
        std::unique_ptr<SingleExpertHook> single;
        if (kind == BaselineKind::kSingleMixed) {
          single = std::make_unique<SingleExpertHook>(&out.mixed);
          hook = single.get();
        } else {
          hook = gated.get();
        }
        auto lm = lm_forward(base, b, hook);
        MoaForward f;
        f.lm_sum = lm.lm_sum;
        f.lm_loss = lm.lm_loss;
        f.lm_count = lm.lm_count;
        return f;
      });
    }

    if (!std::isfinite(st.loss))
      throw NumericalError(strfmt("non-finite baseline loss at step %lld",
                                  static_cast<long long>(step + 1)));
    out.loss_curve.push_back(st.loss);

    if (eval_due(cfg, step)) {
      ordered_json row;
      row["stage"] = "baseline";
      row["step"] = step + 1;
      row["lr"] = lr;
      row["loss"] = st.loss;
      if (kind == BaselineKind::kClassifier) {
        int64_t hit = 0, total = 0;
        NoGradScope ng;
        for (int32_t d = 0; d < n_domains; d++)
          for (const auto& r : domains[d].val) {
            hit += classifier_select(out.classifier, r.prompt) == d;
            total++;
          }
        row["val_acc"] =
            total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
      } else {
        ordered_json ppl = ordered_json::object();
        for (size_t d = 0; d < domains.size(); d++) {
          if (domains[d].val.empty()) continue;
          ppl[std::to_string(d)] = eval_ppl(
              base, domains[d].val, cfg.loss_mask_mode, cfg.batch_size,
              [&](const data::Batch&) -> std::unique_ptr<AdapterHook> {
                if (kind == BaselineKind::kSingleMixed)
                  return std::make_unique<SingleExpertHook>(&out.mixed);
                return std::make_unique<GatedHook>(&out.experts, &out.gates);
              });
        }
        row["val_ppl"] = ppl;
      }
      sink.push(row);
    }
  }
  return out;
}

}  // namespace moa
