#include "wgqa/analysis.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "wgqa/attention.hpp"
#include "wgqa/errors.hpp"
#include "wgqa/model.hpp"

namespace wgqa {

namespace {

// Continued fraction for the incomplete beta (modified Lentz iteration).
double beta_continued_fraction(double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-15;
    constexpr int kMaxIter = 500;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double md = static_cast<double>(m);
        const double m2 = 2.0 * md;
        double aa = md * (b - md) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + md) * (qab + md) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < kEps) return h;
    }
    throw NumericError("incomplete beta continued fraction did not converge for a=" +
                       std::to_string(a) + " b=" + std::to_string(b) + " x=" +
                       std::to_string(x));
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
        throw ConfigError("incomplete beta requires finite a > 0 and b > 0");
    }
    if (!(x >= 0.0) || !(x <= 1.0)) {
        throw ConfigError("incomplete beta requires x in [0, 1]");
    }
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    // The log prefactor is symmetric under (a, b, x) -> (b, a, 1-x).
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    // Use the fraction on whichever side converges fast.
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_continued_fraction(a, b, x) / a;
    }
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
    if (!(df > 0.0) || !std::isfinite(df)) {
        throw ConfigError("student t requires df > 0");
    }
    if (!std::isfinite(t)) {
        throw NumericError("student t statistic is not finite");
    }
    const double x = df / (df + t * t);
    return regularized_incomplete_beta(0.5 * df, 0.5, x);
}

TTestResult one_sample_ttest(const std::vector<double>& samples, double mu0) {
    const std::size_t n = samples.size();
    if (n < 2) {
        throw ConfigError("one-sample t-test needs n >= 2 (degenerate sample)");
    }
    double mean = 0.0;
    for (double s : samples) {
        if (!std::isfinite(s)) {
            throw NumericError("one-sample t-test saw a non-finite sample");
        }
        mean += s;
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double s : samples) ss += (s - mean) * (s - mean);
    const double var = ss / static_cast<double>(n - 1);
    if (!(var > 0.0)) {
        throw ConfigError("one-sample t-test needs positive sample variance "
                          "(degenerate sample)");
    }
    TTestResult r;
    r.n = n;
    r.t = (mean - mu0) / std::sqrt(var / static_cast<double>(n));
    r.p = student_t_two_sided_p(r.t, static_cast<double>(n - 1));
    return r;
}

DivergenceReport head_divergence(const Checkpoint& trained) {
    trained.validate();
    const ModelConfig cfg = ModelConfig::from_checkpoint(trained);
    if (cfg.weighting == Weighting::None) {
        throw ConfigError("head divergence needs a weighted-variant checkpoint; '" +
                          trained.metadata_at("variant") + "' has no aggregation weights");
    }
    // Block-level config (flags irrelevant for aggregation math).
    const AttentionConfig block_cfg = cfg.decoder_cross_attention();
    const std::size_t head_dim = block_cfg.head_dim();
    const std::size_t groups = block_cfg.n_kv_groups;

    DivergenceReport report;
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        for (const char* block : {"self", "cross"}) {
            const std::string base =
                "decoder." + std::to_string(layer) + "." + std::string(block) + ".";
            for (const char* side : {"k", "v"}) {
                const Tensor& w = trained.tensor(base + "w" + side);
                const Tensor& agg = trained.tensor(base + "agg_" + side);
                const Tensor weighted = weighted_aggregate(w, agg, block_cfg);
                const Tensor pooled = mean_pool_heads(w, block_cfg);
                for (std::size_t g = 0; g < groups; ++g) {
                    double abs_sum = 0.0;
                    for (std::size_t r = 0; r < cfg.d_model; ++r) {
                        for (std::size_t c = 0; c < head_dim; ++c) {
                            abs_sum += std::fabs(weighted.at(r, g * head_dim + c) -
                                                 pooled.at(r, g * head_dim + c));
                        }
                    }
                    DivergenceEntry entry;
                    entry.layer = layer;
                    entry.block = block;
                    entry.side = side;
                    entry.group = g;
                    entry.mad = abs_sum / static_cast<double>(cfg.d_model * head_dim);
                    report.entries.push_back(std::move(entry));
                }
            }
        }
    }

    report.sample_count = report.entries.size();
    std::vector<double> mads;
    mads.reserve(report.entries.size());
    double total = 0.0;
    for (const DivergenceEntry& e : report.entries) {
        mads.push_back(e.mad);
        total += e.mad;
    }
    report.overall_mad = total / static_cast<double>(mads.size());
    double ss = 0.0;
    for (double m : mads) ss += (m - report.overall_mad) * (m - report.overall_mad);
    if (mads.size() >= 2 && ss > 0.0) {
        const TTestResult t = one_sample_ttest(mads, 0.0);
        report.degenerate = false;
        report.t_stat = t.t;
        report.p_value = t.p;
    }
    return report;
}

std::string divergence_csv(const DivergenceReport& report) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "layer,block,group,k_or_v,mad\n";
    for (const DivergenceEntry& e : report.entries) {
        out << e.layer << "," << e.block << "," << e.group << "," << e.side << "," << e.mad
            << "\n";
    }
    return out.str();
}

}  // namespace wgqa
