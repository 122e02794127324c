#include "wgqa/attention.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "wgqa/errors.hpp"
#include "wgqa/kernels.hpp"

namespace wgqa {

std::string to_string(Weighting w) {
    switch (w) {
        case Weighting::None: return "none";
        case Weighting::Scalar: return "scalar";
        case Weighting::Row: return "row";
        case Weighting::Col: return "col";
    }
    throw ConfigError("unknown weighting value");
}

std::string to_string(InitScheme s) {
    switch (s) {
        case InitScheme::MeanEquivalent: return "mean";
        case InitScheme::Gaussian: return "rand";
    }
    throw ConfigError("unknown init scheme value");
}

Weighting weighting_from_string(const std::string& s) {
    if (s == "none") return Weighting::None;
    if (s == "scalar") return Weighting::Scalar;
    if (s == "row") return Weighting::Row;
    if (s == "col") return Weighting::Col;
    throw ConfigError("unknown weighting name '" + s + "' (expected none/scalar/row/col)");
}

InitScheme init_from_string(const std::string& s) {
    if (s == "mean") return InitScheme::MeanEquivalent;
    if (s == "rand") return InitScheme::Gaussian;
    throw ConfigError("unknown init scheme '" + s + "' (expected mean/rand)");
}

void AttentionConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || n_kv_groups == 0) {
        throw ConfigError("attention geometry must be positive: d_model=" +
                          std::to_string(d_model) + " n_heads=" + std::to_string(n_heads) +
                          " n_kv_groups=" + std::to_string(n_kv_groups));
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) +
                          " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (n_kv_groups > n_heads) {
        throw ConfigError("n_kv_groups " + std::to_string(n_kv_groups) +
                          " exceeds n_heads " + std::to_string(n_heads));
    }
    if (n_heads % n_kv_groups != 0) {
        throw ConfigError("n_heads " + std::to_string(n_heads) +
                          " is not divisible by n_kv_groups " + std::to_string(n_kv_groups));
    }
    if (causal && cross_attention) {
        throw ConfigError("causal masking applies to self-attention blocks only");
    }
}

namespace {

void require_matrix_shape(const Tensor& t, std::size_t rows, std::size_t cols,
                          const std::string& name) {
    if (t.rank() != 2 || t.rows() != rows || t.cols() != cols) {
        throw DimensionError(name + " must be [" + std::to_string(rows) + "x" +
                             std::to_string(cols) + "], got " + t.shape_str());
    }
}

void require_agg_shape(const Tensor& t, const AttentionConfig& config, const std::string& name) {
    const std::size_t h = config.n_heads;
    switch (config.weighting) {
        case Weighting::None:
            throw ConfigError("aggregation weights are meaningless with weighting none");
        case Weighting::Scalar:
            if (t.rank() != 1 || t.shape()[0] != h) {
                throw DimensionError(name + " must be [" + std::to_string(h) + "], got " +
                                     t.shape_str());
            }
            return;
        case Weighting::Row:
            require_matrix_shape(t, h, config.d_model, name);
            return;
        case Weighting::Col:
            require_matrix_shape(t, h, config.head_dim(), name);
            return;
    }
}

}  // namespace

void AttentionBlock::validate() const {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t hd = config.head_dim();
    require_matrix_shape(proj.w_q, d, d, "w_q");
    require_matrix_shape(proj.w_o, d, d, "w_o");
    const bool weighted = config.weighting != Weighting::None;
    if (weighted != agg.has_value()) {
        throw ConfigError(weighted ? "weighted block is missing aggregation weights"
                                   : "plain block must not carry aggregation weights");
    }
    const std::size_t kv_cols = (weighted ? config.n_heads : config.n_kv_groups) * hd;
    require_matrix_shape(proj.w_k, d, kv_cols, "w_k");
    require_matrix_shape(proj.w_v, d, kv_cols, "w_v");
    if (weighted) {
        require_agg_shape(agg->w_k_agg, config, "w_k_agg");
        require_agg_shape(agg->w_v_agg, config, "w_v_agg");
    }
}

std::size_t group_index(std::size_t query_head, const AttentionConfig& config) {
    config.validate();
    if (query_head >= config.n_heads) {
        throw ConfigError("query head " + std::to_string(query_head) + " out of range for " +
                          std::to_string(config.n_heads) + " heads");
    }
    return query_head * config.n_kv_groups / config.n_heads;
}

Tensor head_slice(const Tensor& w, std::size_t head, std::size_t head_dim) {
    if (w.rank() != 2) {
        throw DimensionError("head_slice expects a matrix, got " + w.shape_str());
    }
    if (head_dim == 0 || (head + 1) * head_dim > w.cols()) {
        throw DimensionError("head " + std::to_string(head) + " with head_dim " +
                             std::to_string(head_dim) + " does not fit in " + w.shape_str());
    }
    const std::size_t rows = w.rows();
    Tensor out({rows, head_dim});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < head_dim; ++c) {
            out.at(r, c) = w.at(r, head * head_dim + c);
        }
    }
    return out;
}

Tensor mean_pool_heads(const Tensor& w, const AttentionConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t hd = config.head_dim();
    require_matrix_shape(w, d, config.n_heads * hd, "ungrouped projection");
    const std::size_t gs = config.group_size();
    Tensor out({d, config.n_kv_groups * hd});
    for (std::size_t g = 0; g < config.n_kv_groups; ++g) {
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (std::size_t i = g * gs; i < (g + 1) * gs; ++i) {
                    acc += w.at(r, i * hd + c);
                }
                out.at(r, g * hd + c) = acc / static_cast<double>(gs);
            }
        }
    }
    return out;
}

Tensor weighted_aggregate(const Tensor& w, const Tensor& agg_vec, const AttentionConfig& config) {
    config.validate();
    if (config.weighting == Weighting::None) {
        throw ConfigError("weighted_aggregate requires a weighting scheme");
    }
    const std::size_t d = config.d_model;
    const std::size_t hd = config.head_dim();
    require_matrix_shape(w, d, config.n_heads * hd, "ungrouped projection");
    require_agg_shape(agg_vec, config, "aggregation weights");
    const std::size_t gs = config.group_size();
    Tensor out({d, config.n_kv_groups * hd});
    for (std::size_t g = 0; g < config.n_kv_groups; ++g) {
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (std::size_t i = g * gs; i < (g + 1) * gs; ++i) {
                    double coef = 0.0;
                    switch (config.weighting) {
                        case Weighting::Scalar: coef = agg_vec[i]; break;
                        case Weighting::Row: coef = agg_vec.at(i, r); break;
                        case Weighting::Col: coef = agg_vec.at(i, c); break;
                        case Weighting::None: break;  // rejected above
                    }
                    acc += coef * w.at(r, i * hd + c);
                }
                out.at(r, g * hd + c) = acc;
            }
        }
    }
    return out;
}

AggregationWeights init_aggregation(const AttentionConfig& config, SeededRng& rng) {
    config.validate();
    const std::size_t h = config.n_heads;
    std::vector<std::size_t> shape;
    switch (config.weighting) {
        case Weighting::None:
            throw ConfigError("init_aggregation requires a weighting scheme");
        case Weighting::Scalar: shape = {h}; break;
        case Weighting::Row: shape = {h, config.d_model}; break;
        case Weighting::Col: shape = {h, config.head_dim()}; break;
    }
    if (config.init == InitScheme::Gaussian) {
        Tensor k = rng.gaussian_tensor(shape);
        Tensor v = rng.gaussian_tensor(shape);
        return AggregationWeights{std::move(k), std::move(v)};
    }
    // Every weight G/h = 1/group_size makes the weighted sum equal the mean
    // pool, so training starts from the plain grouped block.
    const double mean_w =
        static_cast<double>(config.n_kv_groups) / static_cast<double>(config.n_heads);
    return AggregationWeights{Tensor::full(shape, mean_w), Tensor::full(shape, mean_w)};
}

std::pair<Tensor, Tensor> effective_kv(const AttentionBlock& block) {
    block.validate();
    if (block.agg.has_value()) {
        return {weighted_aggregate(block.proj.w_k, block.agg->w_k_agg, block.config),
                weighted_aggregate(block.proj.w_v, block.agg->w_v_agg, block.config)};
    }
    return {block.proj.w_k, block.proj.w_v};
}

ForwardResult attention_forward(const AttentionBlock& block, const Tensor& x_q,
                                const Tensor& x_kv) {
    block.validate();
    const AttentionConfig& cfg = block.config;
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    if (x_q.rank() != 2 || x_q.cols() != d) {
        throw DimensionError("query input must be [n x " + std::to_string(d) + "], got " +
                             x_q.shape_str());
    }
    if (x_kv.rank() != 2 || x_kv.cols() != d) {
        throw DimensionError("key/value input must be [m x " + std::to_string(d) + "], got " +
                             x_kv.shape_str());
    }
    if (!x_q.all_finite() || !x_kv.all_finite()) {
        throw NumericError("attention input contains non-finite values");
    }
    const std::size_t n = x_q.rows();
    const std::size_t m = x_kv.rows();
    if (cfg.causal && n != m) {
        throw DimensionError("causal self-attention needs matching lengths, got " +
                             std::to_string(n) + " queries over " + std::to_string(m) + " keys");
    }

    auto [w_k_eff, w_v_eff] = effective_kv(block);
    Tensor q = matmul(x_q, block.proj.w_q);
    Tensor k = matmul(x_kv, w_k_eff);
    Tensor v = matmul(x_kv, w_v_eff);

    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Tensor concat({n, d});
    std::vector<Tensor> probs;
    probs.reserve(cfg.n_heads);
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        const std::size_t g = group_index(i, cfg);
        Tensor q_i = head_slice(q, i, hd);
        Tensor k_g = head_slice(k, g, hd);
        Tensor v_g = head_slice(v, g, hd);
        Tensor scores = scale(matmul_bt(q_i, k_g), inv_sqrt_hd);
        if (cfg.causal) {
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = r + 1; c < m; ++c) {
                    scores.at(r, c) = neg_inf;
                }
            }
        }
        Tensor p = softmax_rows(scores);
        Tensor o = matmul(p, v_g);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < hd; ++c) {
                concat.at(r, i * hd + c) = o.at(r, c);
            }
        }
        probs.push_back(std::move(p));
    }
    Tensor output = matmul(concat, block.proj.w_o);
    ForwardCache cache{x_q,
                       x_kv,
                       std::move(q),
                       std::move(k),
                       std::move(v),
                       std::move(probs),
                       std::move(concat),
                       std::move(w_k_eff),
                       std::move(w_v_eff)};
    return ForwardResult{std::move(output), std::move(cache)};
}

std::size_t param_count_extra(const AttentionConfig& config, std::size_t n_blocks) {
    config.validate();
    std::size_t per_block = 0;
    switch (config.weighting) {
        case Weighting::None: per_block = 0; break;
        case Weighting::Scalar: per_block = 2 * config.n_heads; break;
        case Weighting::Row: per_block = 2 * config.n_heads * config.d_model; break;
        case Weighting::Col: per_block = 2 * config.n_heads * config.head_dim(); break;
    }
    return per_block * n_blocks;
}

AttentionBlock fold_weights(const AttentionBlock& block) {
    block.validate();
    if (!block.agg.has_value()) {
        throw ConfigError("fold_weights requires a weighted block; this one is already plain");
    }
    AttentionConfig folded_cfg = block.config;
    folded_cfg.weighting = Weighting::None;
    AttentionBlock folded{
        folded_cfg,
        ProjectionSet{block.proj.w_q,
                      weighted_aggregate(block.proj.w_k, block.agg->w_k_agg, block.config),
                      weighted_aggregate(block.proj.w_v, block.agg->w_v_agg, block.config),
                      block.proj.w_o},
        std::nullopt};
    folded.validate();
    return folded;
}

std::size_t kv_cache_bytes(const AttentionConfig& config, std::size_t seq_len,
                           std::size_t n_layers, std::size_t blocks_per_layer,
                           std::size_t bytes_per_elem) {
    config.validate();
    if (seq_len == 0 || n_layers == 0 || blocks_per_layer == 0 || bytes_per_elem == 0) {
        throw ConfigError("kv_cache_bytes arguments must all be positive");
    }
    return 2 * seq_len * config.n_kv_groups * config.head_dim() * n_layers * blocks_per_layer *
           bytes_per_elem;
}

VariantSpec variant_spec(const std::string& name) {
    if (name == "mha") return VariantSpec{name, Weighting::None, false, true};
    if (name == "gqa") return VariantSpec{name, Weighting::None, false, false};
    if (name == "mqa") return VariantSpec{name, Weighting::None, true, false};
    if (name == "wgqa") return VariantSpec{name, Weighting::Scalar, false, false};
    if (name == "wmqa") return VariantSpec{name, Weighting::Scalar, true, false};
    if (name == "rowwgqa") return VariantSpec{name, Weighting::Row, false, false};
    if (name == "colwgqa") return VariantSpec{name, Weighting::Col, false, false};
    if (name == "rowwmqa") return VariantSpec{name, Weighting::Row, true, false};
    if (name == "colwmqa") return VariantSpec{name, Weighting::Col, true, false};
    throw ConfigError("unknown variant '" + name +
                      "' (expected mha/gqa/mqa/wgqa/wmqa/rowwgqa/colwgqa/rowwmqa/colwmqa)");
}

std::size_t variant_group_count(const VariantSpec& spec, std::size_t n_heads,
                                std::optional<std::size_t> requested) {
    if (n_heads == 0) {
        throw ConfigError("variant group count needs a positive head count");
    }
    if (spec.forces_all_groups) {
        if (requested.has_value() && *requested != n_heads) {
            throw ConfigError(spec.name + " requires one group per head, got --groups " +
                              std::to_string(*requested));
        }
        return n_heads;
    }
    if (spec.forces_single_group) {
        if (requested.has_value() && *requested != 1) {
            throw ConfigError(spec.name + " requires a single group, got --groups " +
                              std::to_string(*requested));
        }
        return 1;
    }
    if (requested.has_value()) {
        if (*requested == 0 || *requested > n_heads || n_heads % *requested != 0) {
            throw ConfigError("--groups " + std::to_string(*requested) +
                              " must divide n_heads " + std::to_string(n_heads));
        }
        return *requested;
    }
    if (n_heads % 2 != 0) {
        throw ConfigError(spec.name + " defaults to n_heads/2 groups, but n_heads " +
                          std::to_string(n_heads) + " is odd; pass --groups");
    }
    return n_heads / 2;
}

std::string variant_name(Weighting weighting, std::size_t n_kv_groups, std::size_t n_heads) {
    if (n_heads == 0 || n_kv_groups == 0 || n_kv_groups > n_heads ||
        n_heads % n_kv_groups != 0) {
        throw ConfigError("variant_name: invalid group count " + std::to_string(n_kv_groups) +
                          " for " + std::to_string(n_heads) + " heads");
    }
    const bool single = n_kv_groups == 1;
    switch (weighting) {
        case Weighting::None:
            if (n_kv_groups == n_heads) return "mha";
            return single ? "mqa" : "gqa";
        case Weighting::Scalar: return single ? "wmqa" : "wgqa";
        case Weighting::Row: return single ? "rowwmqa" : "rowwgqa";
        case Weighting::Col: return single ? "colwmqa" : "colwgqa";
    }
    throw ConfigError("variant_name: unknown weighting");
}

AttentionBlock make_random_block(const AttentionConfig& config, SeededRng& rng,
                                 double proj_scale) {
    config.validate();
    const std::size_t d = config.d_model;
    const bool weighted = config.weighting != Weighting::None;
    const std::size_t kv_cols = (weighted ? config.n_heads : config.n_kv_groups) * config.head_dim();
    Tensor w_q = scale(rng.gaussian_tensor({d, d}), proj_scale);
    Tensor w_k = scale(rng.gaussian_tensor({d, kv_cols}), proj_scale);
    Tensor w_v = scale(rng.gaussian_tensor({d, kv_cols}), proj_scale);
    Tensor w_o = scale(rng.gaussian_tensor({d, d}), proj_scale);
    std::optional<AggregationWeights> agg;
    if (weighted) {
        agg = init_aggregation(config, rng);
    }
    AttentionBlock block{config,
                         ProjectionSet{std::move(w_q), std::move(w_k), std::move(w_v),
                                       std::move(w_o)},
                         std::move(agg)};
    block.validate();
    return block;
}

}  // namespace wgqa
