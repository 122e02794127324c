// Times the OpenMP-parallel kernels against the serial naive-loop
// reference on identical inputs, and checks that the two agree bit for
// bit while doing so. On a single hardware thread the "speedup" column
// honestly reports the parallelization overhead instead of a gain.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "wgqa/attention.hpp"
#include "wgqa/kernels.hpp"
#include "wgqa/reference.hpp"
#include "wgqa/rng.hpp"
#include "wgqa/tensor.hpp"

namespace {

using namespace wgqa;
using Clock = std::chrono::steady_clock;

double best_of(std::size_t reps, const std::function<void()>& f) {
    double best = 1e300;
    for (std::size_t i = 0; i < reps; ++i) {
        const auto start = Clock::now();
        f();
        const std::chrono::duration<double, std::milli> elapsed = Clock::now() - start;
        best = std::min(best, elapsed.count());
    }
    return best;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

void report(const std::string& name, const std::string& size, double par_ms,
            double ser_ms, bool exact) {
    std::cout << "  " << std::left << std::setw(18) << name << std::setw(26) << size
              << std::right << std::fixed << std::setprecision(3) << std::setw(10)
              << par_ms << " ms" << std::setw(10) << ser_ms << " ms" << std::setw(9)
              << std::setprecision(2) << ser_ms / par_ms << "x   "
              << (exact ? "bit-exact" : "MISMATCH") << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel benchmark: OpenMP kernels vs the serial reference"};
    std::size_t reps = 5;
    bool quick = false;
    app.add_option("--reps", reps, "timing repetitions per case (best-of)");
    app.add_flag("--quick", quick, "small sizes only, for smoke runs");
    CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
    std::cout << "openmp threads: " << omp_get_max_threads() << "\n";
#else
    std::cout << "openmp threads: 1 (compiled without OpenMP)\n";
#endif
    std::cout << "  " << std::left << std::setw(18) << "kernel" << std::setw(26) << "size"
              << std::right << std::setw(13) << "parallel" << std::setw(13) << "serial"
              << std::setw(10) << "speedup" << "   agreement\n";

    SeededRng rng(2024);
    bool all_exact = true;

    const std::vector<std::size_t> mat_sizes =
        quick ? std::vector<std::size_t>{64} : std::vector<std::size_t>{64, 128, 256};
    for (const std::size_t n : mat_sizes) {
        const Tensor a = rng.gaussian_tensor({n, n});
        const Tensor b = rng.gaussian_tensor({n, n});
        Tensor out_par, out_ser;
        const double par = best_of(reps, [&]() { out_par = matmul(a, b); });
        const double ser = best_of(reps, [&]() { out_ser = ref::matmul_naive(a, b); });
        const bool exact = bit_equal(out_par, out_ser);
        all_exact = all_exact && exact;
        report("matmul", std::to_string(n) + "x" + std::to_string(n) + "x" +
                             std::to_string(n),
               par, ser, exact);
    }

    const std::size_t soft_rows = quick ? 128 : 1024;
    {
        const Tensor a = rng.gaussian_tensor({soft_rows, 256});
        Tensor out_par, out_ser;
        const double par = best_of(reps, [&]() { out_par = softmax_rows(a); });
        const double ser = best_of(reps, [&]() { out_ser = ref::softmax_rows_naive(a); });
        const bool exact = bit_equal(out_par, out_ser);
        all_exact = all_exact && exact;
        report("softmax_rows", std::to_string(soft_rows) + "x256", par, ser, exact);
    }

    const std::vector<std::size_t> seq_sizes =
        quick ? std::vector<std::size_t>{32} : std::vector<std::size_t>{64, 128};
    for (const std::size_t seq : seq_sizes) {
        AttentionConfig cfg;
        cfg.d_model = 64;
        cfg.n_heads = 8;
        cfg.n_kv_groups = 4;
        cfg.weighting = Weighting::Scalar;
        cfg.init = InitScheme::Gaussian;
        cfg.causal = true;
        SeededRng block_rng(7);
        const AttentionBlock block = make_random_block(cfg, block_rng, 0.2);
        const Tensor x = rng.gaussian_tensor({seq, cfg.d_model});
        Tensor out_par, out_ser;
        const double par =
            best_of(reps, [&]() { out_par = attention_forward(block, x, x).output; });
        const double ser =
            best_of(reps, [&]() { out_ser = ref::attention_forward_naive(block, x, x); });
        const bool exact = bit_equal(out_par, out_ser);
        all_exact = all_exact && exact;
        report("attention", "seq " + std::to_string(seq) + ", d=64, h=8, G=4", par, ser,
               exact);
    }

    if (!all_exact) {
        std::cout << "kernel/reference mismatch detected\n";
        return 1;
    }
    std::cout << "all kernels agree with the serial reference bit for bit\n";
    return 0;
}
