#include "jst/layers.hpp"

#include <cmath>

namespace jst {

Linear::Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng, bool with_bias) {
  weight = ps.normal(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) bias = ps.constant(name + ".b", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamSet& ps, const std::string& name, std::size_t dim) {
  gamma = ps.constant(name + ".g", {dim}, 1.0);
  beta = ps.constant(name + ".b", {dim}, 0.0);
}

FeedForward::FeedForward(ParamSet& ps, const std::string& name, std::size_t dim,
                         std::size_t hidden, std::mt19937_64& rng)
    : norm(ps, name + ".ln", dim),
      in(ps, name + ".in", dim, hidden, rng),
      out(ps, name + ".out", hidden, dim, rng) {}

MultiHeadAttention::MultiHeadAttention(ParamSet& ps, const std::string& name, std::size_t dim,
                                       std::size_t kv_dim, std::size_t heads_,
                                       std::size_t max_relative_, std::mt19937_64& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", kv_dim, dim, rng),
      v(ps, name + ".v", kv_dim, dim, rng),
      o(ps, name + ".o", dim, dim, rng),
      heads(heads_),
      max_relative(max_relative_) {
  if (dim % heads != 0) throw Error("model dim must be divisible by the head count");
  if (max_relative > 0) {
    relative_bias = ps.constant(name + ".rel", {heads, 2 * max_relative + 1}, 0.0);
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& memory,
                                      std::span<const std::size_t> key_lengths,
                                      bool causal) const {
  AttentionOptions opts;
  opts.heads = heads;
  opts.key_lengths.assign(key_lengths.begin(), key_lengths.end());
  opts.causal = causal;
  opts.relative_bias = relative_bias;
  opts.max_relative = max_relative;
  return o(attention(q(query), k(memory), v(memory), opts));
}

ConformerBlock::ConformerBlock(ParamSet& ps, const std::string& name, std::size_t dim,
                               std::size_t ff_dim, std::size_t heads, std::size_t kernel,
                               std::size_t max_relative, std::mt19937_64& rng)
    : ff1(ps, name + ".ff1", dim, ff_dim, rng),
      attn_norm(ps, name + ".attn_ln", dim),
      attn(ps, name + ".attn", dim, dim, heads, max_relative, rng),
      conv_norm(ps, name + ".conv_ln", dim),
      pointwise_in(ps, name + ".conv_in", dim, 2 * dim, rng) {
  depthwise_w = ps.normal(name + ".dw.w", {kernel, dim}, 1.0 / std::sqrt(static_cast<double>(kernel)), rng);
  depthwise_b = ps.constant(name + ".dw.b", {dim}, 0.0);
  depthwise_norm = LayerNorm(ps, name + ".dw_ln", dim);
  pointwise_out = Linear(ps, name + ".conv_out", dim, dim, rng);
  ff2 = FeedForward(ps, name + ".ff2", dim, ff_dim, rng);
  out_norm = LayerNorm(ps, name + ".out_ln", dim);
}

Tensor ConformerBlock::operator()(const Tensor& x, std::span<const std::size_t> lengths) const {
  Tensor h = add(x, scale(ff1(x), 0.5));
  const Tensor a = attn_norm(h);
  h = add(h, attn(a, a, lengths));
  Tensor c = glu(pointwise_in(conv_norm(h)));
  c = depthwise_conv1d(c, depthwise_w, depthwise_b, lengths);
  c = pointwise_out(swish(depthwise_norm(c)));
  h = add(h, c);
  h = add(h, scale(ff2(h), 0.5));
  return out_norm(h);
}

std::size_t ConformerBlock::count(std::size_t dim, std::size_t ff_dim, std::size_t heads,
                                  std::size_t kernel, std::size_t max_relative) {
  return 2 * FeedForward::count(dim, ff_dim) + 4 * LayerNorm::count(dim) +
         MultiHeadAttention::count(dim, dim, heads, max_relative) + Linear::count(dim, 2 * dim) +
         kernel * dim + dim + Linear::count(dim, dim);
}

}  // namespace jst
