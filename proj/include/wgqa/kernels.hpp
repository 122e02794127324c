#pragma once

#include <functional>

#include "wgqa/tensor.hpp"

namespace wgqa {

/// Dense kernels used throughout the library. Reductions run in a fixed
/// left-to-right order over the contraction index, so results are
/// bit-identical across runs and thread counts; OpenMP only ever splits
/// work across independent output elements.

// c[i,j] = sum_k a[i,k] * b[k,j]
Tensor matmul(const Tensor& a, const Tensor& b);

// a [m x k] times b [p x k] transposed -> [m x p]
Tensor matmul_bt(const Tensor& a, const Tensor& b);

// a [k x m] transposed times b [k x p] -> [m x p]
Tensor matmul_at(const Tensor& a, const Tensor& b);

// Row-wise softmax with per-row max subtraction. Rows containing -inf
// entries (masked positions) come out with exact zeros there.
Tensor softmax_rows(const Tensor& a);

Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& a, const Tensor& b);
void axpy_inplace(Tensor& a, double alpha, const Tensor& b);  // a += alpha * b

// Central-difference gradient of a scalar function of a tensor:
// g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps);

}  // namespace wgqa
