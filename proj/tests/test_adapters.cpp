#include "moa/adapters.hpp"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "moa/autodiff.hpp"
#include "moa/data.hpp"
#include "moa/ops.hpp"
#include "moa/rng.hpp"

using namespace moa;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 32;
  c.num_heads = 4;
  c.ffn_dim = 64;
  c.vocab_size = 260;  // bytes plus pad/bos/eos/sep
  c.max_seq_len = 64;
  return c;
}

data::EncodedRecord rec(int32_t dom, const std::string& p,
                        const std::string& r) {
  data::EncodedRecord e;
  e.domain_id = dom;
  for (char ch : p) e.prompt.push_back(static_cast<unsigned char>(ch));
  for (char ch : r) e.response.push_back(static_cast<unsigned char>(ch));
  return e;
}

data::Batch toy_batch() {
  return data::make_batch({rec(0, "what is 2+2?", "4"),
                           rec(1, "name a color", "teal"),
                           rec(2, "ping", "pong")},
                          data::MaskMode::kFullSequence);
}

// Gives the zero-initialized B factors nonzero values so deltas actually
// fire in composition tests.
void randomize_b(LoraExpert& e, uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : e.mats)
    for (auto& m : layer)
      for (int64_t i = 0; i < m.B->numel(); i++)
        m.B->set(i, rng.gaussian(0.0, 0.05));
}

TensorPtr& slot_weight(Layer& layer, MatrixSlot s) {
  switch (s) {
    case MatrixSlot::kQ: return layer.wq;
    case MatrixSlot::kK: return layer.wk;
    case MatrixSlot::kV: return layer.wv;
    case MatrixSlot::kO: return layer.wo;
    case MatrixSlot::kFfnUp: return layer.ffn_up;
    default: return layer.ffn_down;
  }
}

uint64_t bytes_checksum(const TensorPtr& t) {
  uint64_t h = 1469598103934665603ull;
  for (int64_t i = 0; i < t->numel(); i++) {
    double v = t->get(i);
    unsigned char buf[sizeof(double)];
    std::memcpy(buf, &v, sizeof(double));
    for (unsigned char b : buf) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace

TEST_CASE("lora delta on a worked-out example") {
  // W0 = I2, A = [1,0]^T, B = [0,1], x = (1,1):
  // x W0 = (1,1); x A = 1; (x A) B = (0,1); y = (1,2).
  auto w0 = Tensor::zeros({2, 2});
  w0->set(0, 1.0);
  w0->set(3, 1.0);
  LoraExpert e;
  e.domain_id = 0;
  e.rank = 1;
  e.scale = 1.0;
  e.slots = {MatrixSlot::kQ};
  LoraMat m;
  m.A = Tensor::zeros({2, 1});
  m.A->set(0, 1.0);
  m.B = Tensor::zeros({1, 2});
  m.B->set(1, 1.0);
  e.mats.push_back({m});

  auto x = Tensor::zeros({1, 2});
  x->set(0, 1.0);
  x->set(1, 1.0);
  auto y = apply_expert(x, w0, e, 0, MatrixSlot::kQ);
  CHECK(y->get(0) == doctest::Approx(1.0));
  CHECK(y->get(1) == doctest::Approx(2.0));

  // scale doubles only the low-rank part
  e.scale = 3.0;
  auto y3 = apply_expert(x, w0, e, 0, MatrixSlot::kQ);
  CHECK(y3->get(0) == doctest::Approx(1.0));
  CHECK(y3->get(1) == doctest::Approx(4.0));

  // unadapted slot falls back to the plain product
  auto yk = apply_expert(x, w0, e, 0, MatrixSlot::kK);
  CHECK(yk->get(0) == doctest::Approx(1.0));
  CHECK(yk->get(1) == doctest::Approx(1.0));
}

TEST_CASE("factored delta matches the dense composed matrix") {
  int64_t d = 16, r = 4, rows = 5;
  ModelConfig c = toy_config();
  c.num_layers = 1;
  c.hidden_dim = d;
  auto e = make_expert(c, 0, r, 0.5, {MatrixSlot::kQ}, 11);
  randomize_b(e, 12);

  Rng rng(13);
  auto x = Tensor::gaussian(rng, {rows, d}, 0.0, 1.0);
  auto w0 = Tensor::gaussian(rng, {d, d}, 0.0, 0.1);
  auto y = apply_expert(x, w0, e, 0, MatrixSlot::kQ);

  const LoraMat& m = *e.mat(0, MatrixSlot::kQ);
  for (int64_t i = 0; i < rows; i++) {
    for (int64_t j = 0; j < d; j++) {
      double acc = 0;
      for (int64_t k = 0; k < d; k++) {
        double weff = w0->get(k * d + j);
        for (int64_t q = 0; q < r; q++)
          weff += 0.5 * m.A->get(k * r + q) * m.B->get(q * d + j);
        acc += x->get(i * d + k) * weff;
      }
      CHECK(std::abs(y->get(i * d + j) - acc) < 1e-4);
    }
  }
}

TEST_CASE("expert folded into base weights reproduces the hooked forward") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 5);
  auto folded = init_base(c, 5);  // independent storage, identical values

  auto e = make_expert(c, 0, 4, 2.0, all_slots(), 21);
  randomize_b(e, 22);
  for (int64_t l = 0; l < c.num_layers; l++) {
    for (MatrixSlot s : e.slots) {
      const LoraMat& m = *e.mat(l, s);
      TensorPtr& w = slot_weight(folded.layers[l], s);
      int64_t din = m.A->shape[0], dout = m.B->shape[1], r = e.rank;
      for (int64_t i = 0; i < din; i++)
        for (int64_t j = 0; j < dout; j++) {
          double acc = 0;
          for (int64_t q = 0; q < r; q++)
            acc += m.A->get(i * r + q) * m.B->get(q * dout + j);
          w->set(i * dout + j, w->get(i * dout + j) + e.scale * acc);
        }
    }
  }

  auto batch = toy_batch();
  SingleExpertHook hook(&e);
  auto hooked = base_forward(base, batch.tokens, batch.lengths, &hook);
  auto plain = base_forward(folded, batch.tokens, batch.lengths);
  double peak = 0, diff = 0;
  for (int64_t i = 0; i < hooked.logits->numel(); i++) {
    peak = std::max(peak, std::abs(plain.logits->get(i)));
    diff = std::max(diff,
                    std::abs(hooked.logits->get(i) - plain.logits->get(i)));
  }
  CHECK(diff <= 1e-4 * std::max(1.0, peak));
}

TEST_CASE("fresh experts leave the base model output unchanged") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 7);
  auto m = make_moa(base, 4, 8, 1.0, 0.1, 0, all_slots(), 31);
  auto batch = toy_batch();

  auto plain = base_forward(base, batch.tokens, batch.lengths);
  SingleExpertHook single(&m.experts[2]);
  auto adapted = base_forward(base, batch.tokens, batch.lengths, &single);
  CHECK(tensors_equal(*plain.logits, *adapted.logits));

  RoutedHook routed(&m.experts, batch.labels);
  auto mixed = base_forward(base, batch.tokens, batch.lengths, &routed);
  CHECK(tensors_equal(*plain.logits, *mixed.logits));
}

TEST_CASE("routing every sequence to one expert equals using it directly") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 9);
  auto m = make_moa(base, 3, 4, 1.0, 0.1, 0, all_slots(), 41);
  for (size_t i = 0; i < m.experts.size(); i++)
    randomize_b(m.experts[i], 50 + i);
  auto batch = toy_batch();

  std::vector<int32_t> all_one(batch.tokens.rows, 1);
  RoutedHook routed(&m.experts, all_one);
  auto via_router = base_forward(base, batch.tokens, batch.lengths, &routed);

  SingleExpertHook single(&m.experts[1]);
  auto direct = base_forward(base, batch.tokens, batch.lengths, &single);

  // grouped gather/compute/merge must be bitwise identical to the direct
  // path, not merely close
  REQUIRE(via_router.logits->numel() == direct.logits->numel());
  for (int64_t i = 0; i < direct.logits->numel(); i++)
    CHECK(via_router.logits->get(i) == direct.logits->get(i));
}

TEST_CASE("mixed routing applies each sequence's own expert") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 9);
  auto m = make_moa(base, 3, 4, 1.0, 0.1, 0, all_slots(), 41);
  for (size_t i = 0; i < m.experts.size(); i++)
    randomize_b(m.experts[i], 50 + i);
  auto batch = toy_batch();  // labels 0,1,2

  RoutedHook routed(&m.experts, batch.labels);
  auto mixed = base_forward(base, batch.tokens, batch.lengths, &routed);

  int64_t T = batch.tokens.cols, V = c.vocab_size;
  for (int32_t e = 0; e < 3; e++) {
    // one-sequence batch re-encoding of row e
    std::vector<data::EncodedRecord> one;
    auto full = toy_batch();
    data::EncodedRecord er;
    er.domain_id = e;
    for (int64_t t = 1; t < batch.lengths[e]; t++) {
      int32_t tok = batch.tokens.at(e, t);
      if (tok == data::kSep) break;
      er.prompt.push_back(tok);
    }
    bool past_sep = false;
    for (int64_t t = 0; t < batch.lengths[e]; t++) {
      int32_t tok = batch.tokens.at(e, t);
      if (past_sep && tok != data::kEos) er.response.push_back(tok);
      if (tok == data::kSep) past_sep = true;
    }
    auto solo = data::make_batch({er}, data::MaskMode::kFullSequence);
    SingleExpertHook single(&m.experts[e]);
    auto direct = base_forward(base, solo.tokens, solo.lengths, &single);
    for (int64_t t = 0; t < batch.lengths[e]; t++)
      for (int64_t v = 0; v < V; v++)
        CHECK(mixed.logits->get((e * T + t) * V + v) ==
              direct.logits->get(t * V + v));
  }
}

TEST_CASE("router logits match a scalar mean-pool reference") {
  int64_t B = 3, T = 5, d = 8, N = 4;
  Rng rng(61);
  auto layer_input = Tensor::gaussian(rng, {B, T, d}, 0.0, 1.0);
  std::vector<int64_t> lengths = {5, 3, 1};
  auto r = make_router(d, N, 0, 62, 0);
  for (int64_t i = 0; i < N; i++) r.b->set(i, 0.01 * double(i + 1));

  auto logits = router_logits(r, layer_input, lengths);
  REQUIRE(logits->shape == std::vector<int64_t>{B, N});
  for (int64_t b = 0; b < B; b++) {
    for (int64_t e = 0; e < N; e++) {
      double acc = r.b->get(e);
      for (int64_t k = 0; k < d; k++) {
        double pooled = 0;
        for (int64_t t = 0; t < lengths[b]; t++)
          pooled += layer_input->get((b * T + t) * d + k);
        pooled /= double(lengths[b]);
        acc += pooled * r.w->get(k * N + e);
      }
      CHECK(std::abs(logits->get(b * N + e) - acc) < 1e-5);
    }
  }
}

TEST_CASE("two-layer router uses the hidden width") {
  auto r = make_router(8, 4, 16, 63, 0);
  CHECK(r.mlp_hidden == 16);
  REQUIRE(r.w1 != nullptr);
  CHECK(r.w1->shape == std::vector<int64_t>{8, 16});
  CHECK(r.w2->shape == std::vector<int64_t>{16, 4});
  Rng rng(64);
  auto layer_input = Tensor::gaussian(rng, {2, 3, 8}, 0.0, 1.0);
  auto logits = router_logits(r, layer_input, {3, 2});
  CHECK(logits->shape == std::vector<int64_t>{2, 4});
}

TEST_CASE("router parameter counts") {
  // one linear (d -> N) with bias per layer
  CHECK(count_router_params(32, 4096, 8) == 1048832);
  CHECK(count_router_params(2, 64, 4) == 520);
  CHECK(count_router_params(1, 1, 1) == 2);
  // two-layer form: (d->h) + (h->N) with biases, per layer
  CHECK(count_router_params(2, 8, 4, 16) == 424);
  CHECK_THROWS_AS(count_router_params(0, 64, 4), UsageError);
  CHECK_THROWS_AS(count_router_params(2, 64, 4, -1), UsageError);
}

TEST_CASE("model wiring is validated") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 3);
  CHECK_THROWS_AS(make_moa(base, 1, 4, 1.0, 0.1, 0, all_slots(), 1),
                  UsageError);
  CHECK_THROWS_AS(make_moa(base, 4, 0, 1.0, 0.1, 0, all_slots(), 1),
                  UsageError);
  CHECK_THROWS_AS(make_moa(base, 4, 4, 1.0, -0.5, 0, all_slots(), 1),
                  UsageError);

  auto m = make_moa(base, 4, 4, 1.0, 0.1, 0, all_slots(), 1);
  std::swap(m.experts[0], m.experts[1]);
  CHECK_THROWS_AS(m.validate(), UsageError);
  std::swap(m.experts[0], m.experts[1]);
  m.routers.pop_back();
  CHECK_THROWS_AS(m.validate(), UsageError);
}

TEST_CASE("joint objective combines both loss terms") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 17);
  auto m = make_moa(base, 4, 4, 1.0, 0.25, 0, all_slots(), 71);
  auto batch = toy_batch();

  auto f = moa_train_forward(m, batch);
  REQUIRE(f.router_logits.size() == size_t(c.num_layers));
  CHECK(f.cls_count == c.num_layers * batch.tokens.rows);
  CHECK(f.lm_count > 0);
  double expect = f.lm_loss->item() + 0.25 * f.cls_loss->item();
  CHECK(std::abs(f.total->item() - expect) < 1e-6);
  // sum and mean forms describe the same quantity
  CHECK(std::abs(f.lm_sum->item() / double(f.lm_count) - f.lm_loss->item()) <
        1e-6);
  CHECK(std::abs(f.cls_sum->item() / double(f.cls_count) -
                 f.cls_loss->item()) < 1e-6);
}

TEST_CASE("zeroed routers score every domain at ln N") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 17);
  auto m = make_moa(base, 4, 4, 1.0, 0.1, 0, all_slots(), 73);
  for (auto& r : m.routers) {
    for (int64_t i = 0; i < r.w->numel(); i++) r.w->set(i, 0.0);
    for (int64_t i = 0; i < r.b->numel(); i++) r.b->set(i, 0.0);
  }
  auto f = moa_train_forward(m, toy_batch());
  CHECK(std::abs(f.cls_loss->item() - std::log(4.0)) < 1e-6);
}

TEST_CASE("identical sequences get identical router rows") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 17);
  auto m = make_moa(base, 4, 4, 1.0, 0.1, 0, all_slots(), 74);
  auto batch = data::make_batch({rec(2, "same prompt", "same answer"),
                                 rec(2, "same prompt", "same answer")},
                                data::MaskMode::kFullSequence);
  auto f = moa_train_forward(m, batch);
  for (const auto& rl : f.router_logits)
    for (int64_t e = 0; e < 4; e++)
      CHECK(rl->get(e) == rl->get(4 + e));
}

TEST_CASE("domain labels are range-checked") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 17);
  auto m = make_moa(base, 2, 4, 1.0, 0.1, 0, all_slots(), 75);
  auto batch = toy_batch();  // labels include 2
  CHECK_THROWS_AS(moa_train_forward(m, batch), UsageError);
  batch.labels = {0, 1, -1};
  CHECK_THROWS_AS(moa_train_forward(m, batch), UsageError);
}

TEST_CASE("routing loss weight zero leaves routers without gradients") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 19);
  auto batch = toy_batch();

  auto run = [&](double eta) {
    auto m = make_moa(base, 4, 4, 1.0, eta, 0, all_slots(), 81);
    TapeScope ts;
    auto f = moa_train_forward(m, batch);
    ts.tape().backward(f.total);
    bool any_router_grad = false;
    for (const auto& r : m.routers)
      if (r.w->grad || r.b->grad) any_router_grad = true;
    bool any_expert_grad = false;
    for (const auto& e : m.experts)
      for (auto& kv : e.named_tensors())
        if (kv.second->grad) any_expert_grad = true;
    return std::make_pair(any_router_grad, any_expert_grad);
  };

  auto [with_routers, with_experts] = run(0.1);
  CHECK(with_routers);
  CHECK(with_experts);
  auto [zero_routers, zero_experts] = run(0.0);
  CHECK_FALSE(zero_routers);  // reporting path records nothing
  CHECK(zero_experts);
}

TEST_CASE("language loss rejects a batch with nothing to score") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 19);
  data::Batch b;
  b.tokens = IntMat(1, 3, data::kPad);
  b.tokens.at(0, 0) = data::kBos;
  b.tokens.at(0, 1) = 'a';
  b.tokens.at(0, 2) = data::kEos;
  b.targets = IntMat(1, 3, -1);
  b.loss_mask = IntMat(1, 3, 0);
  b.lengths = {3};
  b.prompt_lengths = {3};
  b.labels = {0};
  CHECK_THROWS_AS(lm_forward(base, b, nullptr), UsageError);
}

TEST_CASE("token gating with identical experts collapses to one expert") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 23);
  auto proto = make_expert(c, 0, 4, 1.0, all_slots(), 91);
  randomize_b(proto, 92);
  std::vector<LoraExpert> experts;
  for (int32_t i = 0; i < 3; i++) {
    LoraExpert e = proto;  // shares the factor tensors: truly identical
    e.domain_id = i;
    experts.push_back(std::move(e));
  }
  auto gates = make_gates(c, 3, 93);
  auto batch = toy_batch();

  GatedHook gated(&experts, &gates);
  auto via_gate = base_forward(base, batch.tokens, batch.lengths, &gated);
  SingleExpertHook single(&experts[0]);
  auto direct = base_forward(base, batch.tokens, batch.lengths, &single);
  for (int64_t i = 0; i < direct.logits->numel(); i++)
    CHECK(via_gate.logits->get(i) == direct.logits->get(i));
}

TEST_CASE("gate weight is renormalized to one regardless of margin") {
  // saturated gate logits must not scale the chosen expert's delta
  ModelConfig c = toy_config();
  auto base = init_base(c, 23);
  std::vector<LoraExpert> experts;
  for (int32_t i = 0; i < 2; i++) {
    auto e = make_expert(c, i, 4, 1.0, all_slots(), 94 + i);
    randomize_b(e, 96 + i);
    experts.push_back(std::move(e));
  }
  auto gates = make_gates(c, 2, 97);
  for (size_t l = 0; l < gates.w.size(); l++) {
    for (int64_t i = 0; i < gates.w[l]->numel(); i++) gates.w[l]->set(i, 0.0);
    gates.b[l]->set(0, 20.3);  // softmax weight would be ~1 - 2e-18
    gates.b[l]->set(1, -20.3);
  }
  auto batch = toy_batch();
  GatedHook gated(&experts, &gates);
  auto via_gate = base_forward(base, batch.tokens, batch.lengths, &gated);
  SingleExpertHook single(&experts[0]);
  auto direct = base_forward(base, batch.tokens, batch.lengths, &single);
  for (int64_t i = 0; i < direct.logits->numel(); i++)
    CHECK(via_gate.logits->get(i) == direct.logits->get(i));
}

TEST_CASE("per-token gate assignment matches a scalar recompute") {
  ModelConfig c = toy_config();
  c.num_layers = 1;
  std::vector<LoraExpert> experts;
  for (int32_t i = 0; i < 3; i++) {
    auto e = make_expert(c, i, 2, 1.5, {MatrixSlot::kQ}, 101 + i);
    randomize_b(e, 104 + i);
    experts.push_back(std::move(e));
  }
  auto gates = make_gates(c, 3, 107);

  int64_t B = 2, T = 4, d = c.hidden_dim;
  Rng rng(108);
  auto layer_input = Tensor::gaussian(rng, {B, T, d}, 0.0, 1.0);
  GatedHook hook(&experts, &gates);
  hook.on_layer_input(0, layer_input, {T, T});

  const auto& assign = hook.assignment();
  REQUIRE(assign.size() == size_t(B * T));
  for (int64_t r = 0; r < B * T; r++) {
    int32_t best = 0;
    double bestv = -1e300;
    for (int64_t e = 0; e < 3; e++) {
      double acc = gates.b[0]->get(e);
      for (int64_t k = 0; k < d; k++)
        acc += layer_input->get(r * d + k) * gates.w[0]->get(k * 3 + e);
      if (acc > bestv) {
        bestv = acc;
        best = static_cast<int32_t>(e);
      }
    }
    CHECK(assign[r] == best);
  }

  // delta applies each row's own expert at weight one
  auto x = ops::reshape(layer_input, {B * T, d});
  HookCtx ctx{0, MatrixSlot::kQ, B, T};
  auto delta = hook.delta(ctx, x);
  for (int64_t r = 0; r < B * T; r++) {
    const auto& ex = experts[assign[r]];
    const LoraMat& m = *ex.mat(0, MatrixSlot::kQ);
    for (int64_t j = 0; j < d; j++) {
      double acc = 0;
      for (int64_t q = 0; q < 2; q++) {
        double low = 0;
        for (int64_t k = 0; k < d; k++)
          low += x->get(r * d + k) * m.A->get(k * 2 + q);
        acc += low * m.B->get(q * d + j);
      }
      acc *= ex.scale;
      CHECK(std::abs(delta->get(r * d + j) - acc) < 1e-4);
    }
  }
}

TEST_CASE("gates stay frozen") {
  ModelConfig c = toy_config();
  auto gates = make_gates(c, 4, 111);
  for (const auto& [name, t] : gates.named_tensors()) {
    CHECK_FALSE(t->requires_grad);
    CHECK(name.rfind("gate.", 0) == 0);
  }
}

TEST_CASE("expert selection strategies") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 27);
  auto m = make_moa(base, 4, 4, 1.0, 0.1, 0, all_slots(), 121);
  std::vector<int32_t> prompt;
  for (char ch : std::string("route me please")) prompt.push_back(ch);

  SUBCASE("oracle returns the supplied label without a forward pass") {
    auto s = select_expert(m, {}, SelectKind::kOracle, 3);
    CHECK(s.expert == 3);
    CHECK(s.votes.empty());
    CHECK_THROWS_AS(select_expert(m, prompt, SelectKind::kOracle, -1),
                    UsageError);
    CHECK_THROWS_AS(select_expert(m, prompt, SelectKind::kOracle, 4),
                    UsageError);
  }

  SUBCASE("vote and last are deterministic and internally consistent") {
    auto a = select_expert(m, prompt, SelectKind::kVote);
    auto b = select_expert(m, prompt, SelectKind::kVote);
    REQUIRE(a.votes.size() == size_t(c.num_layers));
    REQUIRE(a.probs.size() == size_t(c.num_layers));
    CHECK(a.expert == b.expert);
    CHECK(a.votes == b.votes);
    for (const auto& p : a.probs) {
      double sum = 0;
      for (double v : p) sum += v;
      CHECK(std::abs(sum - 1.0) < 1e-5);
    }
    auto last = select_expert(m, prompt, SelectKind::kLast);
    CHECK(last.expert == last.votes.back());
    // each vote is the argmax of its own probability row
    for (size_t l = 0; l < a.votes.size(); l++) {
      int32_t arg = 0;
      for (int e = 1; e < 4; e++)
        if (a.probs[l][e] > a.probs[l][arg]) arg = e;
      CHECK(a.votes[l] == arg);
    }
  }

  SUBCASE("empty prompt is rejected") {
    CHECK_THROWS_AS(select_expert(m, {}, SelectKind::kVote), UsageError);
  }

  SUBCASE("adding a constant to a router bias does not change the vote") {
    auto before = select_expert(m, prompt, SelectKind::kVote);
    for (auto& r : m.routers)
      for (int64_t i = 0; i < r.b->numel(); i++)
        r.b->set(i, r.b->get(i) + 3.7);
    auto after = select_expert(m, prompt, SelectKind::kVote);
    CHECK(after.expert == before.expert);
    CHECK(after.votes == before.votes);
  }
}

TEST_CASE("majority vote prefers count, then probability, then index") {
  // decision logic exercised directly through a crafted model: with L=2
  // routers forced to disagree, the summed softmax mass breaks the tie
  ModelConfig c = toy_config();
  auto base = init_base(c, 27);
  auto m = make_moa(base, 2, 4, 1.0, 0.1, 0, all_slots(), 123);
  // router 0 prefers expert 0 weakly, router 1 prefers expert 1 strongly
  for (int64_t l = 0; l < 2; l++) {
    for (int64_t i = 0; i < m.routers[l].w->numel(); i++)
      m.routers[l].w->set(i, 0.0);
    m.routers[l].b->set(0, l == 0 ? 0.1 : -4.0);
    m.routers[l].b->set(1, l == 0 ? 0.0 : 4.0);
  }
  std::vector<int32_t> prompt = {'h', 'i'};
  auto s = select_expert(m, prompt, SelectKind::kVote);
  REQUIRE(s.votes == std::vector<int32_t>{0, 1});
  // counts tie 1-1; expert 1 holds more summed probability
  CHECK(s.expert == 1);
  auto last = select_expert(m, prompt, SelectKind::kLast);
  CHECK(last.expert == 1);
}

TEST_CASE("expert tensors are independent modules") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 29);
  auto m = make_moa(base, 3, 4, 1.0, 0.1, 0, all_slots(), 131);
  auto batch = toy_batch();

  uint64_t base_sum = m.base.checksum();
  std::vector<uint64_t> sums;
  for (auto& kv : m.adapter_tensors()) sums.push_back(bytes_checksum(kv.second));

  // forwards with any hook are read-only for parameters
  moa_train_forward(m, batch);
  SingleExpertHook single(&m.experts[1]);
  base_forward(base, batch.tokens, batch.lengths, &single);
  select_expert(m, {'a', 'b'}, SelectKind::kVote);

  CHECK(m.base.checksum() == base_sum);
  size_t i = 0;
  for (auto& kv : m.adapter_tensors())
    CHECK(bytes_checksum(kv.second) == sums[i++]);

  // editing one expert touches no other expert
  randomize_b(m.experts[0], 999);
  i = 0;
  for (auto& kv : m.adapter_tensors()) {
    bool own = kv.first.rfind("expert.0.", 0) == 0;
    bool b_factor = kv.first.back() == 'B';
    if (own && b_factor)
      CHECK(bytes_checksum(kv.second) != sums[i]);
    else
      CHECK(bytes_checksum(kv.second) == sums[i]);
    i++;
  }
}

TEST_CASE("adapter tensor names enumerate experts then routers") {
  ModelConfig c = toy_config();
  auto base = init_base(c, 29);
  auto m = make_moa(base, 2, 4, 1.0, 0.1, 0,
                    {MatrixSlot::kQ, MatrixSlot::kV}, 133);
  auto named = m.adapter_tensors();
  // 2 experts * 2 layers * 2 slots * 2 factors + 2 routers * 2 tensors
  CHECK(named.size() == 16 + 4);
  CHECK(named[0].first == "expert.0.layer.0.q.A");
  CHECK(named[1].first == "expert.0.layer.0.q.B");
  CHECK(named.back().first == "router.1.b");
  for (auto& kv : m.adapter_tensors()) CHECK(kv.second->requires_grad);
}

TEST_CASE("byte classifier pools prompt embeddings") {
  auto clf = make_classifier(260, 16, 6, 141);
  CHECK(clf.embed->shape == std::vector<int64_t>{260, 16});

  std::vector<int32_t> p1 = {'a', 'b', 'c'};
  std::vector<int32_t> p2 = {'x'};
  auto logits = classifier_logits(clf, {p1, p2});
  REQUIRE(logits->shape == std::vector<int64_t>{2, 6});

  // scalar reference for row 0
  for (int64_t e = 0; e < 6; e++) {
    double acc = clf.b->get(e);
    for (int64_t k = 0; k < 16; k++) {
      double pooled = 0;
      for (int32_t tok : p1) pooled += clf.embed->get(tok * 16 + k);
      pooled /= 3.0;
      acc += pooled * clf.w->get(k * 6 + e);
    }
    CHECK(std::abs(logits->get(e) - acc) < 1e-5);
  }

  int32_t pick = classifier_select(clf, p1);
  int64_t arg = 0;
  for (int64_t e = 1; e < 6; e++)
    if (logits->get(e) > logits->get(arg)) arg = e;
  CHECK(pick == static_cast<int32_t>(arg));

  // shifting the bias uniformly cannot change the argmax
  for (int64_t e = 0; e < 6; e++) clf.b->set(e, clf.b->get(e) + 2.5);
  CHECK(classifier_select(clf, p1) == pick);

  CHECK_THROWS_AS(classifier_logits(clf, {}), UsageError);
  CHECK_THROWS_AS(classifier_logits(clf, {std::vector<int32_t>{}}),
                  UsageError);
  CHECK_THROWS_AS(make_classifier(0, 16, 6, 1), UsageError);
}

TEST_CASE("expert and router construction is seed-deterministic") {
  ModelConfig c = toy_config();
  auto e1 = make_expert(c, 2, 4, 1.0, all_slots(), 151);
  auto e2 = make_expert(c, 2, 4, 1.0, all_slots(), 151);
  auto e3 = make_expert(c, 2, 4, 1.0, all_slots(), 152);
  CHECK(tensors_equal(*e1.mats[0][0].A, *e2.mats[0][0].A));
  CHECK_FALSE(tensors_equal(*e1.mats[0][0].A, *e3.mats[0][0].A));
  // B always starts at zero
  for (auto& layer : e1.mats)
    for (auto& m : layer)
      for (int64_t i = 0; i < m.B->numel(); i++) CHECK(m.B->get(i) == 0.0);

  auto r1 = make_router(64, 4, 0, 151, 3);
  auto r2 = make_router(64, 4, 0, 151, 3);
  auto r3 = make_router(64, 4, 0, 151, 4);  // layer feeds the stream name
  CHECK(tensors_equal(*r1.w, *r2.w));
  CHECK_FALSE(tensors_equal(*r1.w, *r3.w));
}
