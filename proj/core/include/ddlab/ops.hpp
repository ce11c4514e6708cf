#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ddlab/tensor.hpp"

/// Differentiable tensor operations. Each op records itself on the active tape
/// when any input requires a gradient. Broadcasting is limited to the bias
/// forms below; every other shape mismatch raises DimensionError.
namespace ddlab::ops {

// Linear algebra -------------------------------------------------------------

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product over the leading axis of rank-3 operands, with optional
/// transposition of either operand's last two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
/// x[... x in] . w[in x out] (+ b[out]).
Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b = std::nullopt);

// Elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
/// Adds `b` across the leading axes; `b.shape` must equal the trailing dims of `x`.
Tensor add_bias(const Tensor& x, const Tensor& b);
/// x[N x C x ...] + b[C] (shared) or b[N x C] (per sample), broadcast over spatial dims.
Tensor add_per_channel(const Tensor& x, const Tensor& b);

Tensor relu(const Tensor& x);
/// Tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

// Shape ----------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::span<const int> axes);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor concat(std::span<const Tensor> xs, int axis);
/// Stacks `n` copies of x along a new leading axis.
Tensor repeat_batch(const Tensor& x, std::int64_t n);
Tensor upsample_nearest2x(const Tensor& x);

// Reductions and normalization -------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// softmax(x / temperature) over the last axis.
Tensor softmax(const Tensor& x, float temperature = 1.0f);
Tensor log_softmax(const Tensor& x, float temperature = 1.0f);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Convolution ----------------------------------------------------------------

/// Cross-correlation: x[N x C x H x W], w[F x C x kh x kw] -> [N x F x H' x W'].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int padding = 0);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);

// Losses ---------------------------------------------------------------------

/// Batch mean of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Batch mean of -sum_k p_k log softmax(logits / temperature)_k. Rows of
/// `target_probs` must sum to 1 within 1e-5; no gradient flows into them.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs, float temperature = 1.0f);
/// Mean of (a - b)^2 over all elements.
Tensor mse_loss(const Tensor& a, const Tensor& b);

// Non-differentiable helpers ---------------------------------------------------

/// Per-sample cross-entropy of [N x K] logits, accumulated in double.
std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const int> labels);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace ddlab::ops
