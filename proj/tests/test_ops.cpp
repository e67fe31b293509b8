#include "moa/ops.hpp"

#include <doctest.h>

#include <cmath>

#include "moa/rng.hpp"
#include "moa/tensor.hpp"

using namespace moa;

namespace {
TensorPtr randn(Rng& rng, std::vector<int64_t> shape) {
  return Tensor::gaussian(rng, std::move(shape), 0.0, 1.0, DType::kF32);
}
}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  auto x = Tensor::zeros({1, 4});
  auto y = ops::softmax(x);
  for (int i = 0; i < 4; i++) CHECK(y->get(i) == doctest::Approx(0.25));
}

TEST_CASE("softmax rows sum to one for random input") {
  Rng rng(3);
  auto x = randn(rng, {7, 13});
  auto y = ops::softmax(x);
  for (int64_t r = 0; r < 7; r++) {
    double s = 0;
    for (int64_t c = 0; c < 13; c++) {
      double p = y->get(r * 13 + c);
      CHECK(p >= 0.0);
      s += p;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("matmul by the identity returns the input") {
  auto x = Tensor::from_values({2, 2}, {3.0, -1.0, 4.0, 2.5});
  auto eye = Tensor::from_values({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK(tensors_equal(*ops::matmul(x, eye), *x));
  auto hand = ops::matmul(
      Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6}),
      Tensor::from_values({3, 2}, {7, 8, 9, 10, 11, 12}));
  CHECK(hand->get(0) == 58.0);
  CHECK(hand->get(1) == 64.0);
  CHECK(hand->get(2) == 139.0);
  CHECK(hand->get(3) == 154.0);
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  auto logits = Tensor::zeros({3, 4});
  auto nll = ops::cross_entropy(logits, {0, 2, -1});
  CHECK(nll->get(0) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  CHECK(nll->get(1) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  CHECK(nll->get(2) == 0.0);  // ignored row contributes nothing
}

TEST_CASE("cross entropy of a near-certain prediction is near zero") {
  auto logits = Tensor::from_values({1, 3}, {50.0, 0.0, 0.0});
  auto nll = ops::cross_entropy(logits, {0});
  CHECK(nll->get(0) < 1e-6);
}

TEST_CASE("rms_norm matches a directly written reference") {
  Rng rng(5);
  auto x = randn(rng, {4, 8});
  auto g = randn(rng, {8});
  auto y = ops::rms_norm(x, g);
  for (int64_t r = 0; r < 4; r++) {
    double ms = 0;
    for (int64_t j = 0; j < 8; j++) {
      double v = x->get(r * 8 + j);
      ms += v * v;
    }
    double inv = 1.0 / std::sqrt(ms / 8.0 + 1e-5);
    for (int64_t j = 0; j < 8; j++) {
      double expect = x->get(r * 8 + j) * inv * g->get(j);
      CHECK(y->get(r * 8 + j) == doctest::Approx(expect).epsilon(1e-5));
    }
  }
}

TEST_CASE("gelu fixes zero and saturates at the rails") {
  auto x = Tensor::from_values({3}, {0.0, 10.0, -10.0});
  auto y = ops::gelu(x);
  CHECK(y->get(0) == 0.0);
  CHECK(y->get(1) == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(std::abs(y->get(2)) < 1e-5);
}

TEST_CASE("embedding lookup copies the addressed rows") {
  auto table = Tensor::from_values({3, 2}, {0, 1, 10, 11, 20, 21});
  IntMat ids(1, 3);
  ids.at(0, 0) = 2;
  ids.at(0, 1) = 0;
  ids.at(0, 2) = 2;
  auto out = ops::embedding_lookup(table, ids);
  CHECK(out->shape == std::vector<int64_t>{1, 3, 2});
  CHECK(out->get(0) == 20.0);
  CHECK(out->get(2) == 0.0);
  CHECK(out->get(5) == 21.0);
}

TEST_CASE("mean_pool averages only the first length rows") {
  auto x = Tensor::from_values({1, 3, 2}, {1, 2, 3, 4, 100, 200});
  auto y = ops::mean_pool(x, {2});
  CHECK(y->get(0) == 2.0);
  CHECK(y->get(1) == 3.0);
}

TEST_CASE("slice of a concat returns the original part") {
  Rng rng(6);
  auto a = randn(rng, {3, 4});
  auto b = randn(rng, {3, 2});
  auto cat = ops::concat(a, b, 1);
  CHECK(cat->shape == std::vector<int64_t>{3, 6});
  CHECK(tensors_equal(*ops::slice(cat, 1, 0, 4), *a));
  CHECK(tensors_equal(*ops::slice(cat, 1, 4, 2), *b));
}

TEST_CASE("transpose swaps the two axes") {
  auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = ops::transpose(a);
  CHECK(t->shape == std::vector<int64_t>{3, 2});
  CHECK(t->get(0) == 1.0);
  CHECK(t->get(1) == 4.0);
  CHECK(t->get(4) == 3.0);
}

TEST_CASE("merge_rows inverts gather_rows on a permutation") {
  Rng rng(7);
  auto x = randn(rng, {6, 3});
  auto top = ops::gather_rows(x, {0, 2, 5});
  auto bot = ops::gather_rows(x, {1, 3, 4});
  auto merged = ops::merge_rows({top, bot}, {{0, 2, 5}, {1, 3, 4}}, 6);
  CHECK(tensors_equal(*merged, *x));  // written rows, so bitwise
}

TEST_CASE("attention output is causal and zero on padded rows") {
  Rng rng(8);
  auto q = randn(rng, {1, 6, 8});
  auto k = randn(rng, {1, 6, 8});
  auto v = randn(rng, {1, 6, 8});
  auto out = ops::attention(q, k, v, 2, {4}, 1e4);
  // rows at and beyond the given length stay zero
  for (int64_t t = 4; t < 6; t++)
    for (int64_t j = 0; j < 8; j++) CHECK(out->get((t * 8) + j) == 0.0);

  // perturbing position 3 must not change outputs at earlier positions
  auto q2 = q->clone();
  auto k2 = k->clone();
  auto v2 = v->clone();
  for (int64_t j = 0; j < 8; j++) {
    k2->set(3 * 8 + j, k2->get(3 * 8 + j) + 5.0);
    v2->set(3 * 8 + j, v2->get(3 * 8 + j) - 2.0);
    q2->set(3 * 8 + j, 0.0);
  }
  auto out2 = ops::attention(q2, k2, v2, 2, {4}, 1e4);
  for (int64_t t = 0; t < 3; t++)
    for (int64_t j = 0; j < 8; j++)
      CHECK(out2->get(t * 8 + j) == out->get(t * 8 + j));

  // first row attends only to itself: output equals its own value row
  for (int64_t j = 0; j < 8; j++)
    CHECK(out->get(j) == doctest::Approx(v->get(j)).epsilon(1e-5));
}

TEST_CASE("shape errors carry the op name and both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(ops::matmul(a, b),
                       doctest::Contains("matmul"), UsageError);
  CHECK_THROWS_WITH_AS(ops::matmul(a, b),
                       doctest::Contains("[2,3]"), UsageError);
  CHECK_THROWS_WITH_AS(ops::mul(a, b), doctest::Contains("mul"), UsageError);
  CHECK_THROWS_WITH_AS(ops::add(a, b), doctest::Contains("add"), UsageError);
  CHECK_THROWS_WITH_AS(ops::rms_norm(a, Tensor::zeros({7})),
                       doctest::Contains("rms_norm"), UsageError);
  CHECK_THROWS_AS(ops::transpose(Tensor::zeros({2, 3, 4})), UsageError);
  CHECK_THROWS_AS(ops::slice(a, 1, 2, 5), UsageError);
  CHECK_THROWS_AS(ops::reshape(a, {7}), UsageError);
  CHECK_THROWS_AS(ops::concat(a, Tensor::zeros({3, 3}), 1), UsageError);
}

TEST_CASE("index arguments are validated") {
  auto table = Tensor::zeros({4, 2});
  IntMat ids(1, 1);
  ids.at(0, 0) = 4;
  CHECK_THROWS_WITH_AS(ops::embedding_lookup(table, ids),
                       doctest::Contains("vocabulary"), UsageError);
  auto logits = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, 3}), UsageError);
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0, -2}), UsageError);
  CHECK_THROWS_AS(ops::cross_entropy(logits, {0}), UsageError);
  auto x = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(ops::gather_rows(x, {3}), UsageError);
  CHECK_THROWS_AS(ops::mean_pool(Tensor::zeros({1, 3, 2}), {4}), UsageError);
  CHECK_THROWS_AS(ops::mean_pool(Tensor::zeros({1, 3, 2}), {0}), UsageError);
}

TEST_CASE("merge_rows requires exact single coverage") {
  auto p0 = Tensor::zeros({2, 3});
  auto p1 = Tensor::zeros({1, 3});
  CHECK_THROWS_AS(ops::merge_rows({p0, p1}, {{0, 1}, {1}}, 3), UsageError);
  CHECK_THROWS_AS(ops::merge_rows({p0, p1}, {{0, 1}, {3}}, 3), UsageError);
  CHECK_THROWS_AS(ops::merge_rows({p0, p1}, {{0, 2}}, 3), UsageError);
  auto ok = ops::merge_rows({p0, p1}, {{0, 2}, {1}}, 3);
  CHECK(ok->shape == std::vector<int64_t>{3, 3});
}

TEST_CASE("attention validates heads and lengths") {
  auto q = Tensor::zeros({1, 4, 8});
  CHECK_THROWS_AS(ops::attention(q, q, q, 3, {4}, 0.0), UsageError);
  CHECK_THROWS_AS(ops::attention(q, q, q, 2, {5}, 0.0), UsageError);
  CHECK_THROWS_AS(ops::attention(q, q, q, 2, {4, 1}, 0.0), UsageError);
}

TEST_CASE("scale and reshape preserve values") {
  auto a = Tensor::from_values({2, 2}, {1, -2, 3, -4});
  auto s = ops::scale(a, -0.5);
  CHECK(s->get(0) == -0.5);
  CHECK(s->get(3) == 2.0);
  auto r = ops::reshape(a, {4});
  CHECK(r->shape == std::vector<int64_t>{4});
  for (int i = 0; i < 4; i++) CHECK(r->get(i) == a->get(i));
}
