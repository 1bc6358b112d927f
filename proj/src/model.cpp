#include "jst/model.hpp"

#include <algorithm>
#include <cmath>

#include "jst/rng.hpp"
#include "jst/vocab.hpp"

namespace jst {

namespace {

std::size_t subsample_convs(std::size_t factor) {
  std::size_t n = 0;
  while ((std::size_t{1} << n) < factor) ++n;
  return n;
}

}  // namespace

void ModelConfig::validate() const {
  if (model_dim == 0 || ff_dim == 0) throw Error("model: dims must be positive");
  if (n_layers_contrastive < 1 || n_layers_mlm < 1) throw Error("model: each block needs at least one layer");
  if (heads == 0 || model_dim % heads != 0) throw Error("model: model_dim must be divisible by heads");
  if (conv_kernel % 2 == 0) throw Error("model: conv_kernel must be odd");
  if (subsample_factor < 1 || (subsample_factor & (subsample_factor - 1)) != 0) {
    throw Error("model: subsample_factor must be a power of two");
  }
  if (codebook_size < 2 || codebook_dim == 0) throw Error("model: codebook too small");
  if (frame_dim == 0) throw Error("model: frame_dim must be positive");
  if (vocab_size <= kNumReserved) throw Error("model: vocab_size must exceed the reserved ids");
  if (!(gumbel_min > 0) || !(gumbel_start >= gumbel_min)) throw Error("model: bad Gumbel temperatures");
}

double ModelConfig::gumbel_temperature(std::uint64_t step) const {
  return std::max(gumbel_min, gumbel_start * std::pow(gumbel_decay, static_cast<double>(step)));
}

ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "desk") return c;
  if (name == "paper-600m" || name == "paper-2b") {
    const bool big = name == "paper-2b";
    c.model_dim = big ? 1408 : 1024;
    c.ff_dim = 4 * c.model_dim;
    c.n_layers_contrastive = big ? 8 : 12;
    c.n_layers_mlm = big ? 32 : 12;
    c.heads = big ? 16 : 8;
    c.conv_kernel = 5;
    c.max_relative = 64;
    c.subsample_factor = 4;
    c.codebook_size = 1024;
    c.codebook_dim = 1024;
    c.frame_dim = 80;
    c.vocab_size = kDefaultVocabSize;
    c.max_text_len = kDefaultTextCap;
    c.gumbel_decay = 0.999995;
    return c;
  }
  throw Error("unknown model preset '" + name + "'");
}

std::vector<std::string> model_preset_names() { return {"desk", "paper-600m", "paper-2b"}; }

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  std::size_t n = 0;
  const std::size_t convs = subsample_convs(cfg.subsample_factor);
  for (std::size_t i = 0; i < convs; ++i) n += 3 * (i == 0 ? cfg.frame_dim : d) * d + d;
  n += Linear::count(convs ? d : cfg.frame_dim, d);
  n += d;                      // speech mask embedding
  n += cfg.vocab_size * d;     // text embedding
  n += (cfg.n_layers_contrastive + cfg.n_layers_mlm) *
       ConformerBlock::count(d, cfg.ff_dim, cfg.heads, cfg.conv_kernel, cfg.max_relative);
  n += Linear::count(d, cfg.codebook_size);
  n += cfg.codebook_size * cfg.codebook_dim;
  n += Linear::count(d, cfg.codebook_dim);
  n += Linear::count(d, cfg.codebook_size);
  n += cfg.vocab_size + (cfg.tie_embeddings ? 0 : cfg.vocab_size * d);
  return n;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(seed, {0x696e6974ULL}));
  const std::size_t d = cfg_.model_dim;
  const std::size_t convs = subsample_convs(cfg_.subsample_factor);
  for (std::size_t i = 0; i < convs; ++i) {
    const std::size_t cin = i == 0 ? cfg_.frame_dim : d;
    const auto name = "subsample." + std::to_string(i);
    sub_w_.push_back(params_.normal(name + ".w", {3 * cin, d}, 1.0 / std::sqrt(3.0 * cin), rng));
    sub_b_.push_back(params_.constant(name + ".b", {d}, 0.0));
  }
  input_proj_ = Linear(params_, "input_proj", convs ? d : cfg_.frame_dim, d, rng);
  mask_embedding_ = params_.normal("speech_mask", {d}, 1.0, rng);
  text_embedding_ = params_.normal("text_embedding", {cfg_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  for (std::size_t i = 0; i < cfg_.n_layers_contrastive; ++i) {
    contrastive_blocks_.emplace_back(params_, "contrastive." + std::to_string(i), d, cfg_.ff_dim,
                                     cfg_.heads, cfg_.conv_kernel, cfg_.max_relative, rng);
  }
  for (std::size_t i = 0; i < cfg_.n_layers_mlm; ++i) {
    mlm_blocks_.emplace_back(params_, "mlm." + std::to_string(i), d, cfg_.ff_dim, cfg_.heads,
                             cfg_.conv_kernel, cfg_.max_relative, rng);
  }
  quantizer_logits_ = Linear(params_, "quantizer", d, cfg_.codebook_size, rng);
  codebook_ = params_.normal("codebook", {cfg_.codebook_size, cfg_.codebook_dim}, 1.0, rng);
  contrastive_proj_ = Linear(params_, "contrastive_proj", d, cfg_.codebook_dim, rng);
  speech_head_ = Linear(params_, "speech_mlm_head", d, cfg_.codebook_size, rng);
  softmax_.weight = cfg_.tie_embeddings
                        ? text_embedding_
                        : params_.normal("char_softmax.w", {cfg_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  softmax_.bias = params_.constant("char_softmax.b", {cfg_.vocab_size}, 0.0);
}

std::unique_ptr<Model> Model::clone() const {
  auto copy = std::make_unique<Model>(cfg_, 0);
  copy->params_.load_entries(params_.to_entries());
  return copy;
}

std::size_t Model::subsampled_length(std::size_t frames) const {
  std::size_t n = frames;
  for (std::size_t i = 0; i < sub_w_.size(); ++i) n = (n + 1) / 2;
  return n;
}

std::vector<std::string> Model::text_only_parameters() const {
  std::vector<std::string> names{"text_embedding", "char_softmax.b"};
  if (!cfg_.tie_embeddings) names.push_back("char_softmax.w");
  return names;
}

Tensor Model::subsample(const std::vector<const FrameSeq*>& frames,
                        std::vector<std::size_t>& lengths) const {
  if (frames.empty()) throw Error("encode: empty speech batch");
  std::size_t max_len = 0;
  for (const auto* f : frames) {
    if (!f || f->count == 0) throw Error("encode_speech: empty utterance");
    if (f->dim != cfg_.frame_dim) {
      throw ShapeError("encode_speech: frames have dim " + std::to_string(f->dim) +
                       ", model expects " + std::to_string(cfg_.frame_dim));
    }
    max_len = std::max(max_len, f->count);
  }
  const std::size_t B = frames.size();
  std::vector<double> buf(B * max_len * cfg_.frame_dim, 0.0);
  lengths.clear();
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(frames[b]->values.begin(), frames[b]->values.end(),
              buf.begin() + static_cast<std::ptrdiff_t>(b * max_len * cfg_.frame_dim));
    lengths.push_back(frames[b]->count);
  }
  Tensor x = Tensor::from({B, max_len, cfg_.frame_dim}, std::move(buf));
  for (std::size_t i = 0; i < sub_w_.size(); ++i) {
    x = swish(conv1d(x, sub_w_[i], sub_b_[i], 3, 2, lengths));
    for (auto& l : lengths) l = (l + 1) / 2;
  }
  return input_proj_(x);
}

Tensor Model::apply_speech_mask(const Tensor& features, const std::vector<MaskPlan>& masks,
                                const std::vector<std::size_t>& lengths) const {
  if (masks.empty()) return features;
  if (masks.size() != lengths.size()) throw Error("encode_speech: one mask plan per utterance required");
  const std::size_t B = features.dim(0), T = features.dim(1);
  std::vector<double> m(B * T, 0.0);
  bool any = false;
  for (std::size_t b = 0; b < B; ++b) {
    for (auto p : masks[b].positions) {
      if (p >= lengths[b]) throw Error("speech mask position beyond subsampled length");
      m[b * T + p] = 1.0;
      any = true;
    }
  }
  if (!any) return features;
  std::vector<double> keep(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) keep[i] = 1.0 - m[i];
  const Tensor mt = Tensor::from({B, T, 1}, std::move(m));
  const Tensor kt = Tensor::from({B, T, 1}, std::move(keep));
  return add(mul(features, kt), mul(mt, mask_embedding_));
}

Tensor Model::embed_text(const std::vector<std::vector<int>>& ids, const std::vector<MaskPlan>& masks,
                         std::vector<std::size_t>& lengths) const {
  if (ids.empty()) throw Error("encode: empty text batch");
  if (!masks.empty() && masks.size() != ids.size()) throw Error("encode_text: one mask plan per sequence required");
  std::size_t max_len = 0;
  lengths.clear();
  for (const auto& s : ids) {
    std::size_t n = s.size();
    while (n > 0 && s[n - 1] == kPadId) --n;
    if (n == 0) throw Error("encode_text: empty or all-pad sequence");
    if (s.size() > cfg_.max_text_len) {
      throw Error("encode_text: sequence of " + std::to_string(s.size()) + " ids exceeds cap " +
                  std::to_string(cfg_.max_text_len));
    }
    lengths.push_back(n);
    max_len = std::max(max_len, n);
  }
  std::vector<int> flat(ids.size() * max_len, kPadId);
  for (std::size_t b = 0; b < ids.size(); ++b) {
    for (std::size_t t = 0; t < lengths[b]; ++t) {
      const int id = ids[b][t];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw Error("encode_text: id " + std::to_string(id) + " outside vocabulary");
      }
      flat[b * max_len + t] = id;
    }
    if (!masks.empty()) {
      for (auto p : masks[b].positions) {
        if (p >= lengths[b]) throw Error("text mask position beyond sequence length");
        flat[b * max_len + p] = kMaskId;
      }
    }
  }
  const Tensor e = embedding(text_embedding_, flat, {ids.size(), max_len});
  return scale(e, std::sqrt(static_cast<double>(cfg_.model_dim)));
}

void Model::run_stack(EncoderOutput& out, const Tensor& x) const {
  Tensor h = x;
  for (const auto& block : contrastive_blocks_) h = block(h, out.lengths);
  out.contrastive = h;
  for (const auto& block : mlm_blocks_) h = block(h, out.lengths);
  out.hidden = h;
  out.batch = x.dim(0);
  out.max_len = x.dim(1);
}

EncoderOutput Model::encode_speech(const std::vector<const FrameSeq*>& frames,
                                   const std::vector<MaskPlan>& masks) const {
  EncoderOutput out;
  Tensor features = subsample(frames, out.lengths);
  out.speech_features = features;
  out.speech_max = features.dim(1);
  out.boundary = out.lengths;
  run_stack(out, apply_speech_mask(features, masks, out.lengths));
  return out;
}

EncoderOutput Model::encode_text(const std::vector<std::vector<int>>& ids,
                                 const std::vector<MaskPlan>& masks) const {
  EncoderOutput out;
  Tensor x = embed_text(ids, masks, out.lengths);
  out.boundary.assign(ids.size(), 0);
  run_stack(out, x);
  return out;
}

EncoderOutput Model::encode_paired(const std::vector<const FrameSeq*>& frames,
                                   const std::vector<std::vector<int>>& ids,
                                   const std::vector<MaskPlan>& speech_masks,
                                   const std::vector<MaskPlan>& text_masks) const {
  if (frames.size() != ids.size()) throw Error("encode_paired: speech and text batch sizes differ");
  std::vector<std::size_t> speech_len, text_len;
  Tensor features = subsample(frames, speech_len);
  Tensor speech = apply_speech_mask(features, speech_masks, speech_len);
  Tensor text = embed_text(ids, text_masks, text_len);
  const std::size_t B = frames.size(), S = speech.dim(1), L = text.dim(1), d = cfg_.model_dim;

  EncoderOutput out;
  out.speech_features = features;
  out.speech_max = S;
  std::size_t max_len = 0;
  for (std::size_t b = 0; b < B; ++b) {
    out.lengths.push_back(speech_len[b] + text_len[b]);
    out.boundary.push_back(speech_len[b]);
    max_len = std::max(max_len, out.lengths.back());
  }
  // Rows of concat([speech rows], [text rows]) laid out as [B, max_len].
  std::vector<std::int64_t> rows(B * max_len, -1);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < speech_len[b]; ++t) rows[b * max_len + t] = static_cast<std::int64_t>(b * S + t);
    for (std::size_t t = 0; t < text_len[b]; ++t) {
      rows[b * max_len + speech_len[b] + t] = static_cast<std::int64_t>(B * S + b * L + t);
    }
  }
  const Tensor both = concat_rows({reshape(speech, {B * S, d}), reshape(text, {B * L, d})});
  run_stack(out, reshape(select_rows(both, rows), {B, max_len, d}));
  return out;
}

QuantizerOutput Model::quantize(const Tensor& features, QuantizerMode mode, double temperature,
                                std::mt19937_64& rng) const {
  if (features.rank() != 2 || features.dim(1) != cfg_.model_dim) {
    throw ShapeError("quantize: expected [N, " + std::to_string(cfg_.model_dim) + "], got " +
                     shape_str(features.shape()));
  }
  const std::size_t N = features.dim(0), V = cfg_.codebook_size;
  const Tensor logits = quantizer_logits_(features);
  QuantizerOutput out;
  out.probs = softmax(logits);
  std::vector<double> noisy(logits.data().begin(), logits.data().end());
  Tensor gumbel;
  if (mode != QuantizerMode::kEval) {
    std::vector<double> g(N * V);
    for (auto& x : g) {
      double u = uniform01(rng);
      while (u <= 0.0) u = uniform01(rng);
      x = -std::log(-std::log(u));
    }
    for (std::size_t i = 0; i < g.size(); ++i) noisy[i] += g[i];
    gumbel = Tensor::from({N, V}, std::move(g));
  }
  std::vector<double> hard(N * V, 0.0);
  out.ids.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double* r = noisy.data() + i * V;
    out.ids[i] = static_cast<int>(std::max_element(r, r + V) - r);
    hard[i * V + static_cast<std::size_t>(out.ids[i])] = 1.0;
  }
  const Tensor hard_t = Tensor::from({N, V}, std::move(hard));
  if (mode == QuantizerMode::kEval) {
    out.vectors = matmul(hard_t, codebook_);
    return out;
  }
  const Tensor soft = softmax(scale(add(logits, gumbel), 1.0 / temperature));
  out.vectors = matmul(mode == QuantizerMode::kSoft ? soft : straight_through(hard_t, soft), codebook_);
  return out;
}

}  // namespace jst
