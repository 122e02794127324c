#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "wgqa/analysis.hpp"
#include "wgqa/checkpoint.hpp"
#include "wgqa/errors.hpp"
#include "wgqa/model.hpp"
#include "wgqa/rng.hpp"

using namespace wgqa;

namespace {

// Reference values computed independently with 40-digit arbitrary-precision
// arithmetic and rounded to the nearest double.
struct BetaCase {
    double a, b, x, want;
};

Checkpoint weighted_checkpoint(Weighting scheme, InitScheme init, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 4;
    cfg.n_kv_groups = 4;  // start from ungrouped attention
    cfg.n_layers = 2;
    cfg.vocab_size = 6;
    cfg.max_seq = 7;
    cfg.weighting = Weighting::None;
    cfg.init = InitScheme::MeanEquivalent;
    const ToyModel source = random_model(cfg, seed);
    AttentionConfig target{8, 4, 2, scheme, init, false, false};
    return convert(to_checkpoint(source), target, seed + 1);
}

}  // namespace

TEST_CASE("regularized incomplete beta matches high-precision references") {
    const BetaCase cases[] = {
        {0.5, 0.5, 0.25, 1.0 / 3.0},
        {2.0, 3.0, 0.4, 0.5248},
        {5.0, 1.0, 0.8, 0.32768},
        {10.0, 10.0, 0.5, 0.5},
        {0.5, 8.0, 0.01, 0.30700785029418753},
        {50.0, 0.5, 0.9, 0.0012041498325598114},
        {4.5, 1.5, 0.999, 0.99975510008642001},
    };
    for (const BetaCase& c : cases) {
        const double got = regularized_incomplete_beta(c.a, c.b, c.x);
        INFO("a=" << c.a << " b=" << c.b << " x=" << c.x);
        CHECK(std::fabs(got - c.want) < 1e-12);
    }
    // A value deep in the lower tail needs a relative check.
    const double tiny = regularized_incomplete_beta(2.0, 2.0, 1e-6);
    CHECK(std::fabs(tiny - 2.999998e-12) / 2.999998e-12 < 1e-10);
}

TEST_CASE("incomplete beta boundaries, symmetry, and domain checks") {
    CHECK(regularized_incomplete_beta(3.0, 4.0, 0.0) == 0.0);
    CHECK(regularized_incomplete_beta(3.0, 4.0, 1.0) == 1.0);

    for (const double x : {0.05, 0.3, 0.5, 0.77, 0.95}) {
        for (const double a : {0.5, 2.0, 7.5}) {
            for (const double b : {0.5, 1.0, 4.0}) {
                const double lhs = regularized_incomplete_beta(a, b, x);
                const double rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);
                CHECK(std::fabs(lhs - rhs) < 1e-12);
            }
        }
    }

    CHECK_THROWS_AS(regularized_incomplete_beta(0.0, 1.0, 0.5), ConfigError);
    CHECK_THROWS_AS(regularized_incomplete_beta(1.0, -2.0, 0.5), ConfigError);
    CHECK_THROWS_AS(regularized_incomplete_beta(1.0, 1.0, -0.1), ConfigError);
    CHECK_THROWS_AS(regularized_incomplete_beta(1.0, 1.0, 1.1), ConfigError);
    CHECK_THROWS_AS(regularized_incomplete_beta(std::nan(""), 1.0, 0.5), ConfigError);
}

TEST_CASE("two-sided student t tail matches references and its symmetries") {
    CHECK(student_t_two_sided_p(0.0, 7.0) == 1.0);  // exact, not approximate
    CHECK(std::fabs(student_t_two_sided_p(2.0, 4.0) - 0.11611652351681559) < 1e-12);
    CHECK(std::fabs(student_t_two_sided_p(-2.5, 10.0) - 0.031446844236608804) < 1e-12);
    CHECK(std::fabs(student_t_two_sided_p(0.5, 30.0) - 0.62072300488512729) < 1e-12);
    // One degree of freedom is the Cauchy distribution: p(1) is exactly 1/2.
    CHECK(std::fabs(student_t_two_sided_p(1.0, 1.0) - 0.5) < 1e-12);

    CHECK(student_t_two_sided_p(-2.0, 4.0) == student_t_two_sided_p(2.0, 4.0));
    CHECK(student_t_two_sided_p(1.0, 7.0) > student_t_two_sided_p(2.0, 7.0));
    CHECK(student_t_two_sided_p(2.0, 7.0) > student_t_two_sided_p(3.0, 7.0));

    CHECK_THROWS_AS(student_t_two_sided_p(1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(student_t_two_sided_p(std::nan(""), 3.0), NumericError);
}

TEST_CASE("one-sample t-test reproduces a hand-checked case") {
    const std::vector<double> samples = {0.08, 0.09, 0.10, 0.11, 0.12};
    const TTestResult r = one_sample_ttest(samples, 0.0);
    CHECK(r.n == 5);
    CHECK(std::fabs(r.t - 14.142135623730950) < 1e-12);  // 10 * sqrt(2)
    CHECK(std::fabs(r.p - 1.4512817061319762e-4) / 1.4512817061319762e-4 < 1e-10);

    const TTestResult sym = one_sample_ttest({-1.0, 1.0}, 0.0);
    CHECK(sym.t == 0.0);
    CHECK(sym.p == 1.0);

    CHECK_THROWS_AS(one_sample_ttest({0.5}, 0.0), ConfigError);
    CHECK_THROWS_AS(one_sample_ttest({0.5, 0.5, 0.5}, 0.0), ConfigError);
    CHECK_THROWS_AS(one_sample_ttest({0.5, std::nan("")}, 0.0), NumericError);
}

TEST_CASE("one-sample t-test flags a clearly shifted seeded sample") {
    SeededRng rng(424242);
    std::vector<double> samples;
    samples.reserve(100);
    for (int i = 0; i < 100; ++i) samples.push_back(0.1 + 0.01 * rng.gaussian());
    const TTestResult r = one_sample_ttest(samples, 0.0);
    CHECK(r.t > 10.0);
    CHECK(r.p < 1e-6);
}

TEST_CASE("mean-equivalent weights show zero divergence and a degenerate test") {
    const Checkpoint ckpt =
        weighted_checkpoint(Weighting::Scalar, InitScheme::MeanEquivalent, 50);
    const DivergenceReport report = head_divergence(ckpt);
    // 2 layers x {self, cross} x {k, v} x 2 groups
    REQUIRE(report.entries.size() == 16);
    CHECK(report.sample_count == 16);
    for (const DivergenceEntry& e : report.entries) CHECK(e.mad == 0.0);
    CHECK(report.overall_mad == 0.0);
    CHECK(report.degenerate);
    CHECK(report.t_stat == 0.0);
    CHECK(report.p_value == 1.0);
}

TEST_CASE("doubled aggregation weights diverge by exactly the pooled magnitude") {
    const Checkpoint base =
        weighted_checkpoint(Weighting::Scalar, InitScheme::MeanEquivalent, 51);
    ToyModel model = model_from_checkpoint(base);
    for (DecoderLayer& layer : model.decoder) {
        for (AttentionBlock* block : {&layer.self_attn, &layer.cross_attn}) {
            REQUIRE(block->agg.has_value());
            block->agg->w_k_agg = Tensor::full({4}, 1.0);  // twice the mean weight
            block->agg->w_v_agg = Tensor::full({4}, 1.0);
        }
    }
    const Checkpoint doubled = to_checkpoint(model);
    const DivergenceReport report = head_divergence(doubled);
    REQUIRE(report.entries.size() == 16);

    // With weights at 2/group_size, aggregate minus pool equals the pooled
    // matrix itself, so each group's value is the mean magnitude of the
    // pooled slice: mean over rows/columns of |(w_h0 + w_h1) / 2|.
    const std::size_t head_dim = 2;
    for (const DivergenceEntry& e : report.entries) {
        const std::string base_name =
            "decoder." + std::to_string(e.layer) + "." + e.block + ".w" + e.side;
        const Tensor& w = doubled.tensor(base_name);
        double abs_sum = 0.0;
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < head_dim; ++c) {
                const double h0 = w.at(r, (2 * e.group) * head_dim + c);
                const double h1 = w.at(r, (2 * e.group + 1) * head_dim + c);
                abs_sum += std::fabs(0.5 * (h0 + h1));
            }
        }
        const double want = abs_sum / static_cast<double>(8 * head_dim);
        CHECK(e.mad == doctest::Approx(want).epsilon(1e-15));
        CHECK(e.mad > 0.0);
    }

    CHECK_FALSE(report.degenerate);
    CHECK(report.t_stat > 0.0);
    CHECK(report.p_value < 1.0);
    double mean = 0.0;
    for (const DivergenceEntry& e : report.entries) mean += e.mad;
    mean /= 16.0;
    CHECK(report.overall_mad == doctest::Approx(mean).epsilon(1e-15));

    // Entry order: layer, then self/cross, then k/v, then group.
    CHECK(report.entries[0].layer == 0);
    CHECK(report.entries[0].block == "self");
    CHECK(report.entries[0].side == "k");
    CHECK(report.entries[0].group == 0);
    CHECK(report.entries[1].group == 1);
    CHECK(report.entries[2].side == "v");
    CHECK(report.entries[4].block == "cross");
    CHECK(report.entries[8].layer == 1);
}

TEST_CASE("randomly initialized aggregation weights diverge measurably") {
    const Checkpoint ckpt = weighted_checkpoint(Weighting::Row, InitScheme::Gaussian, 52);
    const DivergenceReport report = head_divergence(ckpt);
    REQUIRE(report.entries.size() == 16);
    for (const DivergenceEntry& e : report.entries) CHECK(e.mad > 0.0);
    CHECK_FALSE(report.degenerate);
    CHECK(report.overall_mad > 0.0);
}

TEST_CASE("divergence analysis rejects checkpoints without aggregation weights") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 4;
    cfg.n_kv_groups = 2;
    cfg.n_layers = 1;
    cfg.vocab_size = 6;
    cfg.max_seq = 7;
    const ToyModel plain = random_model(cfg, 53);
    CHECK_THROWS_AS(head_divergence(to_checkpoint(plain)), ConfigError);
}

TEST_CASE("divergence rows serialize to parseable full-precision records") {
    const Checkpoint ckpt = weighted_checkpoint(Weighting::Scalar, InitScheme::Gaussian, 54);
    const DivergenceReport report = head_divergence(ckpt);
    const std::string csv = divergence_csv(report);

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < csv.size()) {
        const std::size_t nl = csv.find('\n', start);
        REQUIRE(nl != std::string::npos);  // every row is newline-terminated
        lines.push_back(csv.substr(start, nl - start));
        start = nl + 1;
    }
    REQUIRE(lines.size() == report.entries.size() + 1);
    CHECK(lines[0] == "layer,block,group,k_or_v,mad");

    for (std::size_t i = 0; i < report.entries.size(); ++i) {
        const DivergenceEntry& e = report.entries[i];
        const std::string& row = lines[i + 1];
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            const std::size_t comma = row.find(',', pos);
            if (comma == std::string::npos) {
                fields.push_back(row.substr(pos));
                break;
            }
            fields.push_back(row.substr(pos, comma - pos));
            pos = comma + 1;
        }
        REQUIRE(fields.size() == 5);
        CHECK(fields[0] == std::to_string(e.layer));
        CHECK(fields[1] == e.block);
        CHECK(fields[2] == std::to_string(e.group));
        CHECK(fields[3] == e.side);
        CHECK(std::strtod(fields[4].c_str(), nullptr) == e.mad);  // 17 digits round-trip
    }
}
