#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "attnreg/autodiff.hpp"
#include "attnreg/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the tape of its
// inputs (if any), checks shapes, and rejects non-finite results.
namespace attnreg {

// Dense products. matmul: [m,k]x[k,n]. matmul_nt: a·bᵀ for a [m,k], b [n,k].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise, equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor silu(const Tensor& x);

// Row broadcast: x is [m,n], row has n elements.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor mul_row(const Tensor& x, const Tensor& row);

// Row-wise softmax of scale·x with per-row max subtraction.
Tensor softmax_rows(const Tensor& x, double scale);
// Row-wise standardization without affine terms.
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-5);

// Reductions to a [1] tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);

// Image ops on [H,W].
Tensor avg_pool2d(const Tensor& x, std::size_t factor);
Tensor gaussian_blur2d(const Tensor& x, double sigma);
// Normalized 1-D Gaussian taps, radius ceil(3σ).
std::vector<double> gaussian_kernel(double sigma);
// Half-sample symmetric reflection of index i into [0, n).
std::size_t reflect_index(long i, std::size_t n);

// Token-grid ops. Tokens are [g*g, C] in row-major grid order.
Tensor pool_tokens(const Tensor& x, std::size_t grid, std::size_t factor);
Tensor upsample_tokens(const Tensor& x, std::size_t grid, std::size_t factor);
// [H,W] image <-> [(H/p)*(W/p), p*p] patch tokens.
Tensor patchify(const Tensor& image, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t patch);

// Rows of `table` selected by `ids`; differentiable w.r.t. the table.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);

}  // namespace attnreg
