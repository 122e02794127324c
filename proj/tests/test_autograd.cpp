#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "wgqa/attention.hpp"
#include "wgqa/autograd.hpp"
#include "wgqa/errors.hpp"
#include "wgqa/kernels.hpp"
#include "wgqa/rng.hpp"

using namespace wgqa;
using testutil::max_abs_diff;

namespace {

AttentionConfig cfg(std::size_t d, std::size_t h, std::size_t g, Weighting w,
                    bool causal = false, bool cross = false) {
    AttentionConfig c;
    c.d_model = d;
    c.n_heads = h;
    c.n_kv_groups = g;
    c.weighting = w;
    c.init = InitScheme::Gaussian;
    c.causal = causal;
    c.cross_attention = cross;
    return c;
}

bool all_zero(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != 0.0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("zero output gradient yields zero everywhere") {
    SeededRng rng(51);
    const AttentionBlock block = make_random_block(cfg(8, 4, 2, Weighting::Scalar), rng, 0.5);
    const Tensor x = rng.gaussian_tensor({3, 8});
    const ForwardResult fwd = attention_forward(block, x, x);
    const Gradients g = attention_backward(block, fwd.cache, Tensor({3, 8}));
    CHECK(all_zero(g.d_w_q));
    CHECK(all_zero(g.d_w_k));
    CHECK(all_zero(g.d_w_v));
    CHECK(all_zero(g.d_w_o));
    CHECK(all_zero(g.d_agg->w_k_agg));
    CHECK(all_zero(g.d_agg->w_v_agg));
    CHECK(all_zero(g.d_x_q));
    CHECK(all_zero(g.d_x_kv));
}

TEST_CASE("analytic gradients match finite differences for every variant") {
    std::uint64_t seed = 900;
    for (const Weighting scheme :
         {Weighting::None, Weighting::Scalar, Weighting::Row, Weighting::Col}) {
        for (const std::size_t g : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
            for (const bool cross : {false, true}) {
                SeededRng rng(++seed);
                const AttentionBlock block =
                    make_random_block(cfg(8, 4, g, scheme, false, cross), rng, 0.15);
                const GradCheckReport report = grad_check(block, seed + 1, 1e-5, 1e-6);
                INFO("scheme=", static_cast<int>(scheme), " G=", g, " cross=", cross);
                CHECK(report.pass);
                CHECK(report.max_rel_error < 1e-6);
            }
        }
    }
}

TEST_CASE("analytic gradients survive the causal mask") {
    SeededRng rng(52);
    const AttentionBlock block =
        make_random_block(cfg(8, 4, 2, Weighting::Scalar, true), rng, 0.15);
    const GradCheckReport report = grad_check(block, 520, 1e-5, 1e-6);
    CHECK(report.pass);
}

TEST_CASE("gradient for a one-hot scalar weight is the head-slice inner product") {
    SeededRng rng(53);
    AttentionConfig c = cfg(6, 2, 1, Weighting::Scalar);
    AttentionBlock block = make_random_block(c, rng, 0.5);
    block.agg->w_k_agg = Tensor({2}, {1.0, 0.0});

    const Tensor x = rng.gaussian_tensor({3, 6});
    const ForwardResult fwd = attention_forward(block, x, x);
    const Gradients g = attention_backward(block, fwd.cache, scale(fwd.output, 2.0));

    // chain rule through the aggregation's linearity: d_agg[i] is the inner
    // product of head i's slice with the grouped-projection gradient
    for (std::size_t head = 0; head < 2; ++head) {
        double expected = 0.0;
        const Tensor slice = head_slice(block.proj.w_k, head, 3);
        for (std::size_t r = 0; r < 6; ++r) {
            for (std::size_t col = 0; col < 3; ++col) {
                expected += slice.at(r, col) * g.d_w_k_eff.at(r, col);
            }
        }
        CHECK(rel_err(g.d_agg->w_k_agg[head], expected) < 1e-12);
    }

    // and it agrees with the finite-difference oracle
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& t) {
            AttentionBlock b = block;
            b.agg->w_k_agg = t;
            const Tensor out = attention_forward(b, x, x).output;
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * out[i];
            return s;
        },
        block.agg->w_k_agg, 1e-5);
    CHECK(max_rel_err(g.d_agg->w_k_agg, numeric) < 1e-6);
}

TEST_CASE("a sign-flipped backward is caught by the checker's metric") {
    SeededRng rng(54);
    const AttentionBlock block = make_random_block(cfg(8, 4, 2, Weighting::Scalar), rng, 0.5);
    const Tensor x = rng.gaussian_tensor({3, 8});
    const ForwardResult fwd = attention_forward(block, x, x);
    const Gradients g = attention_backward(block, fwd.cache, scale(fwd.output, 2.0));
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& t) {
            AttentionBlock b = block;
            b.proj.w_q = t;
            const Tensor out = attention_forward(b, x, x).output;
            double s = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * out[i];
            return s;
        },
        block.proj.w_q, 1e-5);
    CHECK(max_rel_err(g.d_w_q, numeric) < 1e-6);           // correct sign passes
    CHECK(max_rel_err(scale(g.d_w_q, -1.0), numeric) > 1e-3);  // corrupted sign fails
}

TEST_CASE("folded-block gradients equal the unfolded grouped-projection gradients") {
    SeededRng rng(55);
    for (const Weighting scheme : {Weighting::Scalar, Weighting::Row, Weighting::Col}) {
        const AttentionBlock block = make_random_block(cfg(8, 4, 2, scheme), rng, 0.5);
        const AttentionBlock folded = fold_weights(block);
        const Tensor x = rng.gaussian_tensor({3, 8});

        const ForwardResult f_un = attention_forward(block, x, x);
        const Gradients g_un = attention_backward(block, f_un.cache, scale(f_un.output, 2.0));
        const ForwardResult f_fo = attention_forward(folded, x, x);
        const Gradients g_fo = attention_backward(folded, f_fo.cache, scale(f_fo.output, 2.0));

        CHECK(max_rel_err(g_fo.d_w_k, g_un.d_w_k_eff) < 1e-9);
        CHECK(max_rel_err(g_fo.d_w_v, g_un.d_w_v_eff) < 1e-9);
        CHECK(max_rel_err(g_fo.d_w_q, g_un.d_w_q) < 1e-9);
    }
}

TEST_CASE("backward rejects a cache from a different geometry") {
    SeededRng rng(56);
    const AttentionBlock a = make_random_block(cfg(8, 4, 2, Weighting::None), rng, 0.5);
    const AttentionBlock b = make_random_block(cfg(8, 4, 1, Weighting::None), rng, 0.5);
    const Tensor x = rng.gaussian_tensor({3, 8});
    const ForwardResult fwd = attention_forward(a, x, x);
    CHECK_THROWS_AS(attention_backward(b, fwd.cache, scale(fwd.output, 2.0)), DimensionError);
    CHECK_THROWS_AS(attention_backward(a, fwd.cache, Tensor({2, 8})), DimensionError);
}

TEST_CASE("the checker rejects nonpositive tolerances and renders CSV") {
    SeededRng rng(57);
    const AttentionBlock block = make_random_block(cfg(4, 2, 1, Weighting::Scalar), rng, 0.15);
    CHECK_THROWS_AS(grad_check(block, 1, 0.0, 1e-6), ConfigError);
    CHECK_THROWS_AS(grad_check(block, 1, 1e-5, 0.0), ConfigError);
    const GradCheckReport report = grad_check(block, 570, 1e-5, 1e-6);
    const std::string csv = grad_check_csv(report);
    CHECK(csv.find("param,max_rel_error,tolerance,pass") == 0);
    CHECK(csv.find("w_q,") != std::string::npos);
    CHECK(csv.find("agg_k,") != std::string::npos);
    CHECK(csv.find("x,") != std::string::npos);
}
