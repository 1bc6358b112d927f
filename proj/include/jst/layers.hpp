#pragma once

#include <random>
#include <span>
#include <string>

#include "jst/ops.hpp"
#include "jst/params.hpp"

namespace jst {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined

  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  static std::size_t count(std::size_t in, std::size_t out, bool with_bias = true) {
    return in * out + (with_bias ? out : 0);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  static std::size_t count(std::size_t dim) { return 2 * dim; }
};

/// LN -> dim x hidden -> swish -> hidden x dim.
struct FeedForward {
  LayerNorm norm;
  Linear in;
  Linear out;

  FeedForward() = default;
  FeedForward(ParamSet& ps, const std::string& name, std::size_t dim, std::size_t hidden,
              std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return out(swish(in(norm(x)))); }
  static std::size_t count(std::size_t dim, std::size_t hidden) {
    return LayerNorm::count(dim) + Linear::count(dim, hidden) + Linear::count(hidden, dim);
  }
};

/// Multi-head attention with its own projections. Relative-position bias is
/// optional (max_relative == 0 disables it).
struct MultiHeadAttention {
  Linear q, k, v, o;
  Tensor relative_bias;  // [heads, 2 * max_relative + 1]
  std::size_t heads = 1;
  std::size_t max_relative = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamSet& ps, const std::string& name, std::size_t dim, std::size_t kv_dim,
                     std::size_t heads, std::size_t max_relative, std::mt19937_64& rng);
  Tensor operator()(const Tensor& query, const Tensor& memory,
                    std::span<const std::size_t> key_lengths, bool causal = false) const;
  static std::size_t count(std::size_t dim, std::size_t kv_dim, std::size_t heads,
                           std::size_t max_relative) {
    return 2 * Linear::count(dim, dim) + 2 * Linear::count(kv_dim, dim) +
           (max_relative ? heads * (2 * max_relative + 1) : 0);
  }
};

/// Conformer block: half-step FF, relative-bias self-attention, convolution
/// module, half-step FF, final layer norm.
struct ConformerBlock {
  FeedForward ff1;
  LayerNorm attn_norm;
  MultiHeadAttention attn;
  LayerNorm conv_norm;
  Linear pointwise_in;  // dim -> 2 dim, gated by GLU
  Tensor depthwise_w;   // [kernel, dim]
  Tensor depthwise_b;   // [dim]
  LayerNorm depthwise_norm;
  Linear pointwise_out;
  FeedForward ff2;
  LayerNorm out_norm;

  ConformerBlock() = default;
  ConformerBlock(ParamSet& ps, const std::string& name, std::size_t dim, std::size_t ff_dim,
                 std::size_t heads, std::size_t kernel, std::size_t max_relative,
                 std::mt19937_64& rng);
  /// x [B, T, dim]; positions at or beyond lengths[b] are padding.
  Tensor operator()(const Tensor& x, std::span<const std::size_t> lengths) const;
  static std::size_t count(std::size_t dim, std::size_t ff_dim, std::size_t heads,
                           std::size_t kernel, std::size_t max_relative);
};

}  // namespace jst
