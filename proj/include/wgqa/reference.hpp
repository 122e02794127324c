#pragma once

#include "wgqa/attention.hpp"
#include "wgqa/tensor.hpp"

namespace wgqa::ref {

/// Serial reference implementations written as plain nested loops, kept
/// deliberately independent of the kernel library so tests and the
/// benchmark have a second opinion to compare against. Accumulations run
/// in the same ascending index order as the kernels, so agreement is
/// expected to be exact, not just close.

Tensor matmul_naive(const Tensor& a, const Tensor& b);

Tensor softmax_rows_naive(const Tensor& a);

Tensor mean_pool_heads_naive(const Tensor& w, const AttentionConfig& config);

Tensor weighted_aggregate_naive(const Tensor& w, const Tensor& agg_vec,
                                const AttentionConfig& config);

// Full attention forward with explicit loops: projects, scores, masks,
// normalizes, and mixes heads one scalar at a time.
Tensor attention_forward_naive(const AttentionBlock& block, const Tensor& x_q,
                               const Tensor& x_kv);

// Plain multi-head attention path with no grouping logic at all; accepts
// only G == h, weighting none. Used to pin down the G==h degeneracy.
Tensor mha_forward(const AttentionBlock& block, const Tensor& x_q, const Tensor& x_kv);

// Single shared key/value head, no group bookkeeping; accepts only G == 1,
// weighting none. Used to pin down the G==1 degeneracy.
Tensor mqa_forward(const AttentionBlock& block, const Tensor& x_q, const Tensor& x_kv);

}  // namespace wgqa::ref
