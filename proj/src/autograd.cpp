#include "wgqa/autograd.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "wgqa/errors.hpp"
#include "wgqa/kernels.hpp"

namespace wgqa {

namespace {

// dst columns [off, off + src.cols()) += src
void add_into_cols(Tensor& dst, const Tensor& src, std::size_t off) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        for (std::size_t c = 0; c < src.cols(); ++c) {
            dst.at(r, off + c) += src.at(r, c);
        }
    }
}

void require_cache_matches(const AttentionBlock& block, const ForwardCache& cache,
                           const Tensor& d_out) {
    const AttentionConfig& cfg = block.config;
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    const std::size_t grouped = cfg.n_kv_groups * hd;
    const std::size_t n = cache.x_q.rows();
    const std::size_t m = cache.x_kv.rows();
    const bool ok = cache.q.rank() == 2 && cache.q.rows() == n && cache.q.cols() == d &&
                    cache.k.rank() == 2 && cache.k.rows() == m && cache.k.cols() == grouped &&
                    cache.v.same_shape(cache.k) && cache.concat.same_shape(cache.q) &&
                    cache.w_k_eff.rank() == 2 && cache.w_k_eff.rows() == d &&
                    cache.w_k_eff.cols() == grouped && cache.w_v_eff.same_shape(cache.w_k_eff) &&
                    cache.probs.size() == cfg.n_heads;
    if (!ok) {
        throw DimensionError("forward cache does not match this block's geometry");
    }
    for (const Tensor& p : cache.probs) {
        if (p.rank() != 2 || p.rows() != n || p.cols() != m) {
            throw DimensionError("cached probabilities have shape " + p.shape_str() +
                                 ", expected [" + std::to_string(n) + "x" + std::to_string(m) +
                                 "]");
        }
    }
    if (d_out.rank() != 2 || d_out.rows() != n || d_out.cols() != d) {
        throw DimensionError("output gradient must be [" + std::to_string(n) + "x" +
                             std::to_string(d) + "], got " + d_out.shape_str());
    }
}

}  // namespace

Gradients attention_backward(const AttentionBlock& block, const ForwardCache& cache,
                             const Tensor& d_out) {
    block.validate();
    require_cache_matches(block, cache, d_out);
    const AttentionConfig& cfg = block.config;
    const std::size_t d = cfg.d_model;
    const std::size_t hd = cfg.head_dim();
    const std::size_t n = cache.x_q.rows();
    const std::size_t m = cache.x_kv.rows();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    // output projection: out = concat * w_o
    Tensor d_concat = matmul_bt(d_out, block.proj.w_o);
    Tensor d_w_o = matmul_at(cache.concat, d_out);

    // per-head walk back to q/k/v; group slices accumulate over member
    // heads in ascending head order
    Tensor d_q({n, d});
    Tensor d_k({m, cfg.n_kv_groups * hd});
    Tensor d_v = Tensor(d_k.shape());
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        const std::size_t g = group_index(i, cfg);
        Tensor d_o_i = head_slice(d_concat, i, hd);
        Tensor q_i = head_slice(cache.q, i, hd);
        Tensor k_g = head_slice(cache.k, g, hd);
        Tensor v_g = head_slice(cache.v, g, hd);
        const Tensor& p = cache.probs[i];

        // o_i = p * v_g
        Tensor d_p = matmul_bt(d_o_i, v_g);
        add_into_cols(d_v, matmul_at(p, d_o_i), g * hd);

        // softmax: d_s[r,c] = p[r,c] * (d_p[r,c] - sum_c' p[r,c'] d_p[r,c'])
        Tensor d_s({n, m});
        for (std::size_t r = 0; r < n; ++r) {
            double row_dot = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                row_dot += p.at(r, c) * d_p.at(r, c);
            }
            for (std::size_t c = 0; c < m; ++c) {
                d_s.at(r, c) = p.at(r, c) * (d_p.at(r, c) - row_dot) * inv_sqrt_hd;
            }
        }

        // s = inv_sqrt_hd * q_i k_g^T (scale already folded into d_s)
        Tensor d_q_i = matmul(d_s, k_g);
        add_into_cols(d_k, matmul_at(d_s, q_i), g * hd);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < hd; ++c) {
                d_q.at(r, i * hd + c) = d_q_i.at(r, c);
            }
        }
    }

    // projections: q = x_q w_q, k = x_kv w_k_eff, v = x_kv w_v_eff
    Tensor d_w_q = matmul_at(cache.x_q, d_q);
    Tensor d_x_q = matmul_bt(d_q, block.proj.w_q);
    Tensor d_w_k_eff = matmul_at(cache.x_kv, d_k);
    Tensor d_w_v_eff = matmul_at(cache.x_kv, d_v);
    Tensor d_x_kv = add(matmul_bt(d_k, cache.w_k_eff), matmul_bt(d_v, cache.w_v_eff));

    Gradients grads;
    grads.d_w_o = std::move(d_w_o);
    grads.d_w_q = std::move(d_w_q);
    grads.d_x_q = std::move(d_x_q);
    grads.d_x_kv = std::move(d_x_kv);

    if (!block.agg.has_value()) {
        grads.d_w_k = d_w_k_eff;
        grads.d_w_v = d_w_v_eff;
        grads.d_w_k_eff = std::move(d_w_k_eff);
        grads.d_w_v_eff = std::move(d_w_v_eff);
        return grads;
    }

    // through the aggregation: eff[r, g*hd+c] = sum_i coef_i(r,c) w[r, i*hd+c]
    const std::size_t gs = cfg.group_size();
    auto backprop_agg = [&](const Tensor& w, const Tensor& agg_vec, const Tensor& d_eff,
                            Tensor& d_w, Tensor& d_agg) {
        for (std::size_t g = 0; g < cfg.n_kv_groups; ++g) {
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t c = 0; c < hd; ++c) {
                    const double de = d_eff.at(r, g * hd + c);
                    for (std::size_t j = 0; j < gs; ++j) {
                        const std::size_t i = g * gs + j;
                        const double wv = w.at(r, i * hd + c);
                        switch (cfg.weighting) {
                            case Weighting::Scalar:
                                d_w.at(r, i * hd + c) = agg_vec[i] * de;
                                d_agg[i] += wv * de;
                                break;
                            case Weighting::Row:
                                d_w.at(r, i * hd + c) = agg_vec.at(i, r) * de;
                                d_agg.at(i, r) += wv * de;
                                break;
                            case Weighting::Col:
                                d_w.at(r, i * hd + c) = agg_vec.at(i, c) * de;
                                d_agg.at(i, c) += wv * de;
                                break;
                            case Weighting::None:
                                break;  // unreachable: agg present
                        }
                    }
                }
            }
        }
    };

    Tensor d_w_k(block.proj.w_k.shape());
    Tensor d_w_v(block.proj.w_v.shape());
    Tensor d_agg_k(block.agg->w_k_agg.shape());
    Tensor d_agg_v(block.agg->w_v_agg.shape());
    backprop_agg(block.proj.w_k, block.agg->w_k_agg, d_w_k_eff, d_w_k, d_agg_k);
    backprop_agg(block.proj.w_v, block.agg->w_v_agg, d_w_v_eff, d_w_v, d_agg_v);
    grads.d_w_k = std::move(d_w_k);
    grads.d_w_v = std::move(d_w_v);
    grads.d_agg = AggregationWeights{std::move(d_agg_k), std::move(d_agg_v)};
    grads.d_w_k_eff = std::move(d_w_k_eff);
    grads.d_w_v_eff = std::move(d_w_v_eff);
    return grads;
}

double rel_err(double a, double b) {
    const double denom = std::max(std::max(std::fabs(a), std::fabs(b)), 1e-8);
    return std::fabs(a - b) / denom;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("max_rel_err: shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, rel_err(a[i], b[i]));
    }
    return worst;
}

GradCheckReport grad_check(const AttentionBlock& block, std::uint64_t seed, double eps,
                           double tol) {
    block.validate();
    if (!(eps > 0.0) || !(tol > 0.0)) {
        throw ConfigError("grad_check requires positive eps and tol");
    }
    const AttentionConfig& cfg = block.config;
    SeededRng rng(seed);
    const std::size_t n = 3;
    const std::size_t m = cfg.cross_attention ? 4 : n;
    // Small input magnitudes keep the loss (and with it the roundoff noise of the
    // central difference, which grows with ulp(loss)/eps) far below the tolerance,
    // so the relative-error metric stays meaningful even for near-zero gradient
    // components that land under its absolute floor.
    constexpr double kProbeScale = 0.002;
    Tensor x_q = scale(rng.gaussian_tensor({n, cfg.d_model}), kProbeScale);
    Tensor x_kv =
        cfg.cross_attention ? scale(rng.gaussian_tensor({m, cfg.d_model}), kProbeScale) : x_q;

    auto loss_of = [](const AttentionBlock& b, const Tensor& xq, const Tensor& xkv) {
        const Tensor out = attention_forward(b, xq, xkv).output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * out[i];
        return s;
    };

    ForwardResult fwd = attention_forward(block, x_q, x_kv);
    if (!fwd.output.all_finite()) {
        throw NumericError("grad_check: forward output is not finite");
    }
    Gradients grads = attention_backward(block, fwd.cache, scale(fwd.output, 2.0));

    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;
    report.max_rel_error = 0.0;
    report.pass = true;

    auto check = [&](const std::string& name, const Tensor& analytic,
                     const std::function<double(const Tensor&)>& f, const Tensor& x0) {
        if (!analytic.all_finite()) {
            throw NumericError("grad_check: analytic gradient for " + name + " is not finite");
        }
        const Tensor numeric = finite_diff_grad(f, x0, eps);
        const double err = max_rel_err(analytic, numeric);
        report.rows.push_back(GradCheckRow{name, err, err < tol});
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.pass = report.pass && err < tol;
    };

    check("w_q", grads.d_w_q,
          [&](const Tensor& t) {
              AttentionBlock b = block;
              b.proj.w_q = t;
              return loss_of(b, x_q, x_kv);
          },
          block.proj.w_q);
    check("w_k", grads.d_w_k,
          [&](const Tensor& t) {
              AttentionBlock b = block;
              b.proj.w_k = t;
              return loss_of(b, x_q, x_kv);
          },
          block.proj.w_k);
    check("w_v", grads.d_w_v,
          [&](const Tensor& t) {
              AttentionBlock b = block;
              b.proj.w_v = t;
              return loss_of(b, x_q, x_kv);
          },
          block.proj.w_v);
    check("w_o", grads.d_w_o,
          [&](const Tensor& t) {
              AttentionBlock b = block;
              b.proj.w_o = t;
              return loss_of(b, x_q, x_kv);
          },
          block.proj.w_o);
    if (block.agg.has_value()) {
        check("agg_k", grads.d_agg->w_k_agg,
              [&](const Tensor& t) {
                  AttentionBlock b = block;
                  b.agg->w_k_agg = t;
                  return loss_of(b, x_q, x_kv);
              },
              block.agg->w_k_agg);
        check("agg_v", grads.d_agg->w_v_agg,
              [&](const Tensor& t) {
                  AttentionBlock b = block;
                  b.agg->w_v_agg = t;
                  return loss_of(b, x_q, x_kv);
              },
              block.agg->w_v_agg);
    }
    if (cfg.cross_attention) {
        check("x_q", grads.d_x_q, [&](const Tensor& t) { return loss_of(block, t, x_kv); }, x_q);
        check("x_kv", grads.d_x_kv, [&](const Tensor& t) { return loss_of(block, x_q, t); },
              x_kv);
    } else {
        check("x", add(grads.d_x_q, grads.d_x_kv),
              [&](const Tensor& t) { return loss_of(block, t, t); }, x_q);
    }
    return report;
}

std::string grad_check_csv(const GradCheckReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "param,max_rel_error,tolerance,pass\n";
    for (const GradCheckRow& row : report.rows) {
        out << row.param << ',' << row.max_rel_error << ',' << report.tol << ','
            << (row.pass ? 1 : 0) << '\n';
    }
    return out.str();
}

}  // namespace wgqa
