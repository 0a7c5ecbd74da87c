// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor. Broadcasting is trailing-axis only:
// the second operand's shape must be a suffix of the first's (or a single
// element). Every op validates shapes and throws ShapeError naming itself.

#pragma once

#include <cstdint>
#include <vector>

#include "ddit/tensor.hpp"

namespace ddit {

using Index = std::vector<int64_t>;

// a (..., K) · b (K, N) -> (..., N)
Tensor matmul(const Tensor& a, const Tensor& b);
// a (B, M, K) · b (B, K, N) -> (B, M, N); with transpose_b, b is (B, N, K).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// a (N, ...) with each row n multiplied by s[n]; s has N elements.
Tensor mul_rows(const Tensor& a, const Tensor& s);
Tensor add_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a, int64_t axis);
Tensor mean(const Tensor& a, int64_t axis);
// Full reductions return shape {1}.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Over the last axis.
Tensor softmax(const Tensor& a);
// Over the last axis; gamma/beta may be undefined for the non-affine form.
Tensor layer_norm(const Tensor& a, const Tensor& gamma = {}, const Tensor& beta = {}, double eps = 1e-5);

// Rows are slices along axis 0. Indices may repeat.
Tensor gather_rows(const Tensor& a, const Index& index);
// out[index[r]] += src[r]; out has `rows` rows.
Tensor scatter_add_rows(const Tensor& src, const Index& index, int64_t rows);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis = 0);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

} // namespace ddit
