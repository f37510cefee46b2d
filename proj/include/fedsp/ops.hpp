#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedsp/tensor.hpp"

// Differentiable ops. Each op records itself on the active tape when any
// operand requires a gradient and grad mode is on.
namespace fedsp::ops {

/// [..., m, k] x [k, n] (shared right operand) or [..., m, k] x [..., k, n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise sum; `b`'s shape must equal `a`'s or be a suffix of it
/// (broadcast over leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);

Tensor softmax(const Tensor& x);

/// Layer norm over the last axis with learnable gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Gathers rows of `table` ([vocab, d]) for `ids`, shaped `ids_shape` + [d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);

/// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);

/// Repeats `a` over new leading dims: result shape is `leading` + a.shape.
Tensor expand(const Tensor& a, const Shape& leading);

/// Attention mask for scores shaped [..., T, prefix + T]: query t sees every
/// prefix slot and key positions <= t. Masked entries become -inf.
Tensor causal_mask(const Tensor& scores, std::size_t prefix_len);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

/// Mean next-token cross entropy. `logits` is [..., V]; `targets` holds one id
/// per row; rows whose target is `ignore_index` are skipped.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::int32_t ignore_index = -1);

}  // namespace fedsp::ops
