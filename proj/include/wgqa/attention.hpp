#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wgqa/rng.hpp"
#include "wgqa/tensor.hpp"

namespace wgqa {

// How grouped key/value heads are aggregated from member heads.
//   None   - element-wise mean (plain MHA/GQA/MQA)
//   Scalar - one learned scalar per head
//   Row    - one learned length-d vector per head, scales projection rows
//   Col    - one learned length-head_dim vector per head, scales columns
enum class Weighting { None, Scalar, Row, Col };

// MeanEquivalent sets every weight to G/h so the block starts out equal to
// the mean-pooled one; Gaussian draws standard-normal weights.
enum class InitScheme { MeanEquivalent, Gaussian };

std::string to_string(Weighting w);
std::string to_string(InitScheme s);
Weighting weighting_from_string(const std::string& s);
InitScheme init_from_string(const std::string& s);

struct AttentionConfig {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;      // query heads h
    std::size_t n_kv_groups = 0;  // G; G == h is MHA, G == 1 is MQA
    Weighting weighting = Weighting::None;
    InitScheme init = InitScheme::MeanEquivalent;
    bool causal = false;
    bool cross_attention = false;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t group_size() const { return n_heads / n_kv_groups; }
    // Throws ConfigError unless 1 <= G <= h, h | d_model, G | h, and the
    // causal/cross flags are compatible.
    void validate() const;
};

// Q/K/V/output projections of one attention block. Head i of an ungrouped
// matrix is the column slice [i*head_dim, (i+1)*head_dim).
struct ProjectionSet {
    Tensor w_q;  // [d x d]
    Tensor w_k;  // [d x (h or G) * head_dim]
    Tensor w_v;  // same width as w_k
    Tensor w_o;  // [d x d]
};

// Learned per-head aggregation weights. Shapes by scheme:
// Scalar -> [h], Row -> [h x d], Col -> [h x head_dim].
struct AggregationWeights {
    Tensor w_k_agg;
    Tensor w_v_agg;
};

struct AttentionBlock {
    AttentionConfig config;
    ProjectionSet proj;
    std::optional<AggregationWeights> agg;

    // Shape consistency: with agg present w_k/w_v stay at ungrouped width
    // h*head_dim; without agg they carry grouped width G*head_dim.
    void validate() const;
};

// Saved intermediates from attention_forward, sufficient for the backward
// pass without re-running the forward.
struct ForwardCache {
    Tensor x_q, x_kv;
    Tensor q;                  // [n x d]
    Tensor k, v;               // [m x G*head_dim]
    std::vector<Tensor> probs; // per query head, [n x m]
    Tensor concat;             // [n x d], head outputs before w_o
    Tensor w_k_eff, w_v_eff;   // grouped projections used this pass
};

struct ForwardResult {
    Tensor output;
    ForwardCache cache;
};

// Group that owns query head `query_head`: floor(head * G / h).
// Contiguous query heads share a group.
std::size_t group_index(std::size_t query_head, const AttentionConfig& config);

// Collapse an ungrouped [d x h*head_dim] projection to [d x G*head_dim] by
// averaging each group's member-head slices element-wise.
Tensor mean_pool_heads(const Tensor& w, const AttentionConfig& config);

// Weighted version of mean_pool_heads: group g's slice is the sum over its
// member heads of (per-head weight applied to the head's slice). agg_vec
// shape must match config.weighting.
Tensor weighted_aggregate(const Tensor& w, const Tensor& agg_vec,
                          const AttentionConfig& config);

// Fresh aggregation weights for both K and V per config.init.
AggregationWeights init_aggregation(const AttentionConfig& config, SeededRng& rng);

// Grouped K/V projections the forward pass will use: the stored matrices
// for plain blocks, the weighted aggregate for weighted ones.
std::pair<Tensor, Tensor> effective_kv(const AttentionBlock& block);

// Scaled dot-product attention over grouped heads. Self-attention passes
// the same activations for x_q and x_kv (causal mask per config); cross
// attention takes encoder output as x_kv.
ForwardResult attention_forward(const AttentionBlock& block, const Tensor& x_q,
                                const Tensor& x_kv);

// Learnable parameters added by the weighting scheme across n_blocks
// attention blocks: 0 (None), 2h (Scalar), 2*h*d (Row), 2*h*head_dim (Col)
// per block.
std::size_t param_count_extra(const AttentionConfig& config, std::size_t n_blocks);

// Bake the aggregation weights into the grouped projections. The returned
// weighting-None block reproduces the input block's forward outputs with
// plain-GQA inference cost.
AttentionBlock fold_weights(const AttentionBlock& block);

// Bytes of K/V activations a decoder must keep for seq_len tokens:
// 2 * seq_len * G * head_dim * n_layers * blocks_per_layer * bytes_per_elem.
std::size_t kv_cache_bytes(const AttentionConfig& config, std::size_t seq_len,
                           std::size_t n_layers, std::size_t blocks_per_layer,
                           std::size_t bytes_per_elem);

// Gaussian-initialized block for the given config, projections scaled by
// `proj_scale`; aggregation weights per config.init when weighted.
AttentionBlock make_random_block(const AttentionConfig& config, SeededRng& rng,
                                 double proj_scale);

// Copy of head i's column slice [d x head_dim] of an ungrouped projection.
Tensor head_slice(const Tensor& w, std::size_t head, std::size_t head_dim);

// One named attention variant: its weighting scheme plus any group-count
// constraint the name itself implies (mha pins G=h, the *mqa family pins
// G=1, the *gqa family defaults to h/2 but accepts any divisor).
struct VariantSpec {
    std::string name;
    Weighting weighting;
    bool forces_single_group;
    bool forces_all_groups;
};

// Lookup by CLI name: mha, gqa, mqa, wgqa, wmqa, rowwgqa, colwgqa,
// rowwmqa, colwmqa. Throws ConfigError on anything else.
VariantSpec variant_spec(const std::string& name);

// Resolve the group count for a variant: honors `requested` when the
// variant allows it, rejects contradictions (e.g. wmqa with G=2), and
// defaults to h, 1, or h/2 by family.
std::size_t variant_group_count(const VariantSpec& spec, std::size_t n_heads,
                                std::optional<std::size_t> requested);

// Canonical variant name for a (weighting, G, h) combination; the inverse
// of variant_spec + variant_group_count.
std::string variant_name(Weighting weighting, std::size_t n_kv_groups, std::size_t n_heads);

}  // namespace wgqa
