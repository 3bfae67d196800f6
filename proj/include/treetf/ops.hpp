#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>

#include "treetf/tensor.hpp"

namespace treetf {

/// Additive mask sentinel. softmax maps it to exactly 0.
inline constexpr double kMaskSentinel = -std::numeric_limits<double>::infinity();

// Batched matrix product: a [..., m, k] x b [..., k, n] -> [..., m, n].
// Leading batch dimensions broadcast numpy-style; a rank-2 `b` is shared
// across every batch of `a`.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops with numpy broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor sqrt(const Tensor& x);  // DomainError on negative input
Tensor log(const Tensor& x);   // DomainError on negative input
Tensor exp(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

/// Softmax along `axis`, stabilized by max subtraction. Entries equal to
/// kMaskSentinel get probability 0; a slice that is entirely masked maps to
/// all zeros (used for padding rows).
Tensor softmax(const Tensor& x, int axis = -1);

/// Normalizes the last dimension, then applies gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);

/// Rows of `table` [V, h] gathered by `ids`; result shape is ids_shape + [h].
/// Throws std::out_of_range for an id outside [0, V).
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape);

/// Mean token cross-entropy of logits [N, C] against targets; targets equal
/// to ignore_index contribute nothing. All-ignored input yields 0.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index = -100);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, int axis0, int axis1);
/// Drops `axis` by picking one index along it.
Tensor select(const Tensor& x, int axis, std::int64_t index);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

}  // namespace treetf
