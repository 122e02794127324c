#include "wgqa/kernels.hpp"

#include <cmath>
#include <cstdint>
#include <limits>

#include "wgqa/errors.hpp"

namespace wgqa {

namespace {

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr std::size_t kParallelWorkThreshold = 1u << 15;

void require_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                             t.shape_str());
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree: " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    Tensor c({m, p});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    // i-k-j order: each c[i,j] still accumulates over k = 0..k-1 left to
    // right, identical to the naive i-j-k reference, but the j loop
    // vectorizes and rows parallelize.
    const bool par = m > 1 && m * k * p >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = pc + i * p;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[i * k + t];
            const double* brow = pb + t * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_bt");
    require_2d(b, "matmul_bt");
    const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_bt: inner dimensions disagree: " + a.shape_str() +
                             " vs " + b.shape_str() + " transposed");
    }
    Tensor c({m, p});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    const bool par = m > 1 && m * k * p >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            double s = 0.0;
            const double* arow = pa + i * k;
            const double* brow = pb + j * k;
            for (std::size_t t = 0; t < k; ++t) s += arow[t] * brow[t];
            pc[i * p + j] = s;
        }
    }
    return c;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_at");
    require_2d(b, "matmul_at");
    const std::size_t k = a.rows(), m = a.cols(), p = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul_at: inner dimensions disagree: " + a.shape_str() +
                             " transposed vs " + b.shape_str());
    }
    Tensor c({m, p});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    const bool par = m > 1 && m * k * p >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double* crow = pc + i * p;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[t * m + i];
            const double* brow = pb + t * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

Tensor softmax_rows(const Tensor& a) {
    require_2d(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({m, n});
    const bool par = m > 1 && m * n >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (par)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= inv;
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void axpy_inplace(Tensor& a, double alpha, const Tensor& b) {
    require_same_shape(a, b, "axpy_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
    if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite function value at component " +
                               std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    return grad;
}

}  // namespace wgqa
