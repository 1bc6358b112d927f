#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "jst/tensor.hpp"

namespace jst {

// Elementwise arithmetic with numpy-style right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);

/// Gated linear unit over the last axis: first half * sigmoid(second half).
Tensor glu(const Tensor& a);

/// a[..., k] x b[k, n] -> [..., n]. With `transpose_b`, b is read as [n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// x W + bias over the last axis; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over the leading axis of a [N, d] tensor -> [d].
Tensor mean_rows(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

/// Normalization over the last axis. gamma/beta may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Rows of `table` [V, d] selected by `ids`; output shape is `prefix` + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape prefix);

/// Gathers rows along the leading axis (row = everything after axis 0).
/// Index -1 yields a zero row.
Tensor select_rows(const Tensor& x, std::span<const std::int64_t> rows);
/// Concatenates along the leading axis.
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Per-row L2 normalization over the last axis.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);
/// Dot product over the last axis: [..., d] x [..., d] -> [...].
Tensor rowwise_dot(const Tensor& a, const Tensor& b);

/// Max over time of x [B, T, d] restricted to the first lengths[b] steps.
Tensor max_pool_time(const Tensor& x, std::span<const std::size_t> lengths);

/// Mean of -log_probs[i, targets[i]] over rows of a [N, C] tensor.
Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets);
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Forward value of `hard`, gradient routed to `soft` (straight-through).
Tensor straight_through(const Tensor& hard, const Tensor& soft);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

struct AttentionOptions {
  std::size_t heads = 1;
  /// Valid key count per batch element; empty means all keys valid.
  std::vector<std::size_t> key_lengths;
  bool causal = false;
  /// Optional [heads, 2 * max_relative + 1] bias indexed by clipped (j - i).
  Tensor relative_bias;
  std::size_t max_relative = 0;
};

/// Multi-head scaled dot-product attention. q [B, Tq, d], k/v [B, Tk, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionOptions& opts);

/// Depthwise "same" convolution over time. x [B, T, C], weight [K, C] (K odd),
/// bias [C]. Positions at or beyond lengths[b] are zeroed before convolving.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::span<const std::size_t> lengths);

/// Dense strided convolution over time with symmetric zero padding (K-1)/2.
/// x [B, T, Cin], weight [K * Cin, Cout], bias [Cout] -> [B, ceil(T/stride), Cout].
/// Input positions at or beyond lengths[b] are treated as zero.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::span<const std::size_t> lengths);

}  // namespace jst
