#include "wgqa/reference.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "wgqa/errors.hpp"

namespace wgqa::ref {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// x [rows x d] times the [d x cols] matrix w, one scalar at a time.
Tensor project(const Tensor& x, const Tensor& w) {
    const std::size_t rows = x.rows();
    const std::size_t inner = x.cols();
    const std::size_t cols = w.cols();
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::size_t t = 0; t < inner; ++t) {
                acc += x.at(r, t) * w.at(t, c);
            }
            out.at(r, c) = acc;
        }
    }
    return out;
}

// One query/key/value head walk: scores, mask, softmax, value mix. The
// key/value head occupies columns [kv_off, kv_off + hd) of k and v; the
// query head occupies columns [q_off, q_off + hd) of q. Writes the head
// output into columns [q_off, q_off + hd) of concat.
void attend_head(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t q_off,
                 std::size_t kv_off, std::size_t hd, bool causal, Tensor& concat) {
    const std::size_t n = q.rows();
    const std::size_t m = k.rows();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> row(m, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        // scaled scores for query r, with causal positions pinned to -inf
        for (std::size_t s = 0; s < m; ++s) {
            if (causal && s > r) {
                row[s] = kNegInf;
                continue;
            }
            double acc = 0.0;
            for (std::size_t c = 0; c < hd; ++c) {
                acc += q.at(r, q_off + c) * k.at(s, kv_off + c);
            }
            row[s] = acc * inv_sqrt_hd;
        }
        // softmax with max subtraction
        double mx = kNegInf;
        for (std::size_t s = 0; s < m; ++s) {
            if (row[s] > mx) mx = row[s];
        }
        double denom = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
            row[s] = std::exp(row[s] - mx);
            denom += row[s];
        }
        const double inv = 1.0 / denom;
        for (std::size_t s = 0; s < m; ++s) {
            row[s] *= inv;
        }
        // mix values
        for (std::size_t c = 0; c < hd; ++c) {
            double acc = 0.0;
            for (std::size_t s = 0; s < m; ++s) {
                acc += row[s] * v.at(s, kv_off + c);
            }
            concat.at(r, q_off + c) = acc;
        }
    }
}

}  // namespace

Tensor matmul_naive(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul_naive shapes disagree: " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    return project(a, b);
}

Tensor softmax_rows_naive(const Tensor& a) {
    const std::size_t rows = a.rows();
    const std::size_t cols = a.cols();
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = kNegInf;
        for (std::size_t c = 0; c < cols; ++c) {
            if (a.at(r, c) > mx) mx = a.at(r, c);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out.at(r, c) = std::exp(a.at(r, c) - mx);
            denom += out.at(r, c);
        }
        const double inv = 1.0 / denom;
        for (std::size_t c = 0; c < cols; ++c) {
            out.at(r, c) *= inv;
        }
    }
    return out;
}

Tensor mean_pool_heads_naive(const Tensor& w, const AttentionConfig& config) {
    config.validate();
    const std::size_t hd = config.head_dim();
    const std::size_t gs = config.group_size();
    if (w.rank() != 2 || w.rows() != config.d_model || w.cols() != config.n_heads * hd) {
        throw DimensionError("mean_pool_heads_naive expects ungrouped width, got " +
                             w.shape_str());
    }
    Tensor out({config.d_model, config.n_kv_groups * hd});
    for (std::size_t r = 0; r < config.d_model; ++r) {
        for (std::size_t g = 0; g < config.n_kv_groups; ++g) {
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < gs; ++j) {
                    acc += w.at(r, (g * gs + j) * hd + c);
                }
                out.at(r, g * hd + c) = acc / static_cast<double>(gs);
            }
        }
    }
    return out;
}

Tensor weighted_aggregate_naive(const Tensor& w, const Tensor& agg_vec,
                                const AttentionConfig& config) {
    config.validate();
    if (config.weighting == Weighting::None) {
        throw ConfigError("weighted_aggregate_naive requires a weighting scheme");
    }
    const std::size_t hd = config.head_dim();
    const std::size_t gs = config.group_size();
    if (w.rank() != 2 || w.rows() != config.d_model || w.cols() != config.n_heads * hd) {
        throw DimensionError("weighted_aggregate_naive expects ungrouped width, got " +
                             w.shape_str());
    }
    Tensor out({config.d_model, config.n_kv_groups * hd});
    for (std::size_t r = 0; r < config.d_model; ++r) {
        for (std::size_t g = 0; g < config.n_kv_groups; ++g) {
            for (std::size_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < gs; ++j) {
                    const std::size_t head = g * gs + j;
                    double coef = 0.0;
                    switch (config.weighting) {
                        case Weighting::Scalar: coef = agg_vec[head]; break;
                        case Weighting::Row: coef = agg_vec.at(head, r); break;
                        case Weighting::Col: coef = agg_vec.at(head, c); break;
                        case Weighting::None: break;
                    }
                    acc += coef * w.at(r, head * hd + c);
                }
                out.at(r, g * hd + c) = acc;
            }
        }
    }
    return out;
}

Tensor attention_forward_naive(const AttentionBlock& block, const Tensor& x_q,
                               const Tensor& x_kv) {
    block.validate();
    const AttentionConfig& cfg = block.config;
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    const std::size_t n = x_q.rows();

    Tensor w_k_eff =
        block.agg.has_value()
            ? weighted_aggregate_naive(block.proj.w_k, block.agg->w_k_agg, cfg)
            : block.proj.w_k;
    Tensor w_v_eff =
        block.agg.has_value()
            ? weighted_aggregate_naive(block.proj.w_v, block.agg->w_v_agg, cfg)
            : block.proj.w_v;

    Tensor q = project(x_q, block.proj.w_q);
    Tensor k = project(x_kv, w_k_eff);
    Tensor v = project(x_kv, w_v_eff);

    Tensor concat({n, d});
    const std::size_t gs = cfg.group_size();
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        const std::size_t g = i / gs;
        attend_head(q, k, v, i * hd, g * hd, hd, cfg.causal, concat);
    }
    return project(concat, block.proj.w_o);
}

Tensor mha_forward(const AttentionBlock& block, const Tensor& x_q, const Tensor& x_kv) {
    block.validate();
    const AttentionConfig& cfg = block.config;
    if (cfg.n_kv_groups != cfg.n_heads || cfg.weighting != Weighting::None) {
        throw ConfigError("mha_forward accepts plain blocks with one group per head only");
    }
    const std::size_t hd = cfg.head_dim();
    Tensor q = project(x_q, block.proj.w_q);
    Tensor k = project(x_kv, block.proj.w_k);
    Tensor v = project(x_kv, block.proj.w_v);
    Tensor concat({x_q.rows(), cfg.d_model});
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        attend_head(q, k, v, i * hd, i * hd, hd, cfg.causal, concat);
    }
    return project(concat, block.proj.w_o);
}

Tensor mqa_forward(const AttentionBlock& block, const Tensor& x_q, const Tensor& x_kv) {
    block.validate();
    const AttentionConfig& cfg = block.config;
    if (cfg.n_kv_groups != 1 || cfg.weighting != Weighting::None) {
        throw ConfigError("mqa_forward accepts plain single-group blocks only");
    }
    const std::size_t hd = cfg.head_dim();
    Tensor q = project(x_q, block.proj.w_q);
    Tensor k = project(x_kv, block.proj.w_k);
    Tensor v = project(x_kv, block.proj.w_v);
    Tensor concat({x_q.rows(), cfg.d_model});
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        attend_head(q, k, v, i * hd, 0, hd, cfg.causal, concat);
    }
    return project(concat, block.proj.w_o);
}

}  // namespace wgqa::ref
