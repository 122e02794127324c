#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wgqa/attention.hpp"

namespace wgqa {

// Gradients of a scalar loss with respect to everything an attention block
// touches. d_w_k_eff/d_w_v_eff are the gradients at the grouped-projection
// midpoint of the chain rule; for plain blocks they equal d_w_k/d_w_v.
struct Gradients {
    Tensor d_w_q, d_w_k, d_w_v, d_w_o;
    std::optional<AggregationWeights> d_agg;  // present iff the block is weighted
    Tensor d_x_q, d_x_kv;                     // callers add these for self-attention
    Tensor d_w_k_eff, d_w_v_eff;
};

// Exact reverse-mode gradients for attention_forward, given the upstream
// output gradient d_out [n x d] and the cache from the matching forward.
Gradients attention_backward(const AttentionBlock& block, const ForwardCache& cache,
                             const Tensor& d_out);

// |a - b| / max(|a|, |b|, 1e-8): relative error that stays stable near zero.
double rel_err(double a, double b);
double max_rel_err(const Tensor& a, const Tensor& b);

struct GradCheckRow {
    std::string param;
    double max_rel_error;
    bool pass;
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double max_rel_error;
    bool pass;
    double eps;
    double tol;
};

// Compares every analytic gradient of a sum-of-squares loss on seeded
// random inputs against central finite differences. Self-attention blocks
// report one combined input row "x"; cross-attention reports x_q and x_kv.
GradCheckReport grad_check(const AttentionBlock& block, std::uint64_t seed, double eps,
                           double tol);

// Machine-readable rendering: header line then one row per parameter group.
std::string grad_check_csv(const GradCheckReport& report);

}  // namespace wgqa
