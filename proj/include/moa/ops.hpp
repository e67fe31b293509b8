#pragma once

#include <vector>

#include "moa/autodiff.hpp"
#include "moa/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes, computes the forward
// result through the kernel layer, and records a backward closure on the
// active tape when any input requires grad. Broadcasting is limited to
// leading-batch forms (rank-3 times rank-2 matmul, trailing-shape add);
// anything else is a shape error.
namespace moa::ops {

// a: (m,k) | (B,m,k); b: (k,n), or (B,k,n) when a is (B,m,k).
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

// b has the same shape as a, or a trailing suffix of it (bias broadcast).
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
// Elementwise product, identical shapes.
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double s);
// Rank-2 transpose.
TensorPtr transpose(const TensorPtr& a);

// table: (V,d); ids: (B,T) with every id in [0,V) -> (B,T,d).
TensorPtr embedding_lookup(const TensorPtr& table, const IntMat& ids);

// Softmax over the last axis.
TensorPtr softmax(const TensorPtr& x);

// y = x / sqrt(mean(x^2) + eps) * gain over the last axis; gain: (d).
TensorPtr rms_norm(const TensorPtr& x, const TensorPtr& gain,
                   double eps = 1e-5);

TensorPtr gelu(const TensorPtr& x);

// Concatenate along axis; shapes equal elsewhere.
TensorPtr concat(const TensorPtr& a, const TensorPtr& b, int axis);

// Contiguous slice [start, start+len) along axis.
TensorPtr slice(const TensorPtr& x, int axis, int64_t start, int64_t len);

// x: (B,T,d); mean over positions [0, lengths[b]) per sequence -> (B,d).
TensorPtr mean_pool(const TensorPtr& x, const std::vector<int64_t>& lengths);

// logits: (R,C); targets: length R with values in [0,C) or -1 to skip.
// Returns per-row NLL (R,), zero on skipped rows.
TensorPtr cross_entropy(const TensorPtr& logits,
                        const std::vector<int32_t>& targets);

// Sum of all elements -> scalar (rank-0).
TensorPtr sum(const TensorPtr& x);

// Copy with a new shape of equal numel.
TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> new_shape);

// Row gather along axis 0 of a rank-2 tensor.
TensorPtr gather_rows(const TensorPtr& x, const std::vector<int64_t>& idx);

// Inverse of a grouped gather: pieces[g] holds the rows listed in groups[g];
// every output row must be covered exactly once. Rows are written, not
// accumulated, so a merged result is bitwise equal to computing each row in
// its piece.
TensorPtr merge_rows(const std::vector<TensorPtr>& pieces,
                     const std::vector<std::vector<int64_t>>& groups,
                     int64_t rows_out);

// Fused causal multi-head attention. q,k,v: (B,T,d); lengths[b] masks key
// positions >= lengths[b]; query rows at padded positions yield zeros.
// Rotary position encoding is applied to q and k when rope_base > 0
// (adjacent-pair rotation, angle t * base^(-2i/head_dim)).
TensorPtr attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                    int64_t n_heads, const std::vector<int64_t>& lengths,
                    double rope_base);

}  // namespace moa::ops
