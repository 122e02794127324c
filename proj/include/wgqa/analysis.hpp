#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "wgqa/checkpoint.hpp"

namespace wgqa {

// Regularized incomplete beta function I_x(a, b) for a, b > 0 and
// x in [0, 1], evaluated with a modified-Lentz continued fraction behind a
// log-gamma prefactor. Absolute accuracy around 1e-10 or better over the
// tested domain.
double regularized_incomplete_beta(double a, double b, double x);

// Two-sided tail probability of Student's t at `t` with `df` degrees of
// freedom: I_{df/(df+t^2)}(df/2, 1/2). Exactly 1 at t = 0.
double student_t_two_sided_p(double t, double df);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    std::size_t n = 0;
};

// t = (mean - mu0) / (s / sqrt(n)) with the n-1 sample variance; p is the
// two-sided Student-t tail at n-1 degrees of freedom. Throws ConfigError
// for n < 2 or zero sample variance (degenerate sample).
TTestResult one_sample_ttest(const std::vector<double>& samples, double mu0);

// Mean absolute difference between a learned-weight aggregation and plain
// mean pooling, for one decoder block / head group / projection side.
struct DivergenceEntry {
    std::size_t layer = 0;
    std::string block;  // "self" or "cross"
    std::string side;   // "k" or "v"
    std::size_t group = 0;
    double mad = 0.0;
};

struct DivergenceReport {
    std::vector<DivergenceEntry> entries;
    double overall_mad = 0.0;  // mean over entries
    std::size_t sample_count = 0;
    // One-sample t-test of the per-group MAD values against zero. When
    // every MAD is identical (e.g. mean-equivalent init, all zero) the
    // sample is degenerate: no test, t and p stay at their defaults.
    bool degenerate = true;
    double t_stat = 0.0;
    double p_value = 1.0;
};

// Compares each decoder block's weighted aggregate against mean pooling on
// a weighted-variant checkpoint. Throws ConfigError when the checkpoint's
// variant has no aggregation weights.
DivergenceReport head_divergence(const Checkpoint& trained);

// "layer,block,group,k_or_v,mad" rows at 17 significant digits.
std::string divergence_csv(const DivergenceReport& report);

}  // namespace wgqa
