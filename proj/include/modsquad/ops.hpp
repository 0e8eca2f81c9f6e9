#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "modsquad/tensor.hpp"

// Differentiable tensor operations. Matrices are row-major; "rows" of a
// tensor of any rank are the slices along its last axis.
namespace modsquad::ops {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// a * s where s is a one-element tensor.
Tensor mul_scalar(const Tensor& a, const Tensor& s);

// Adds a length-n vector to every row of a [.. x n].
Tensor add_row(const Tensor& a, const Tensor& row);
// Row r of a gets row (r mod p.rows()) of p; p is [period x n].
Tensor add_tiled(const Tensor& a, const Tensor& p);
// Multiplies row r of a [m x n] by c[r]; c has m elements.
Tensor mul_col(const Tensor& a, const Tensor& c);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
// log(1+exp(x)) as max(x,0)+log1p(exp(-|x|)).
Tensor softplus(const Tensor& x);
// Exact erf-based GELU.
Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
// Throws DomainError on a nonpositive entry.
Tensor log(const Tensor& x);
// 1/x; throws DomainError on zero.
Tensor reciprocal(const Tensor& x);
// x*log(x) with 0*log(0) := 0 and zero gradient at x == 0. Entries must be >= 0.
Tensor xlogx(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
// Row-wise normalization followed by gain * xhat + bias (gain/bias length n).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// Plain normalization without affine parameters.
Tensor layer_norm(const Tensor& x);

// Sum of all entries -> [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Column sums of [m x n] -> [1 x n].
Tensor sum_rows(const Tensor& x);
// Row sums of [m x n] -> [m x 1].
Tensor sum_cols(const Tensor& x);
// Means of consecutive groups of `group` rows: [g*group x n] -> [g x n].
Tensor mean_pool(const Tensor& x, std::size_t group);

Tensor reshape(const Tensor& x, Shape shape);
// Stacks along the first axis; every input is viewed as [rows x n].
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Entries x[rows[i], col] -> [n x 1].
Tensor gather_column(const Tensor& x, std::span<const std::size_t> rows, std::size_t col);

struct RowScatter {
  std::vector<std::size_t> rows;
  Tensor values;  // [rows.size() x n]
};
// [total_rows x n] zeros plus each part's values added at its row indices,
// applied in list order.
Tensor scatter_add_rows(std::size_t total_rows, std::size_t n, const std::vector<RowScatter>& parts);

// Key/value range for one query in segment_attention.
struct KeySpan {
  std::size_t begin;
  std::size_t length;
};
// out[i] = softmax(q_i . K[span_i]^T / sqrt(d)) . V[span_i]
Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         std::span<const KeySpan> spans);

// Mean over all entries of (pred - target)^2; target carries no gradient.
Tensor mse_loss(const Tensor& pred, std::span<const double> target);
// Mean negative log-likelihood of integer labels under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace modsquad::ops
