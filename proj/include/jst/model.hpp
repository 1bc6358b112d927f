#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/layers.hpp"
#include "jst/masking.hpp"

namespace jst {

struct ModelConfig {
  std::string preset = "desk";
  std::size_t model_dim = 32;
  std::size_t ff_dim = 64;
  std::size_t n_layers_contrastive = 1;
  std::size_t n_layers_mlm = 1;
  std::size_t heads = 2;
  std::size_t conv_kernel = 5;
  std::size_t max_relative = 8;
  std::size_t subsample_factor = 4;
  std::size_t codebook_size = 64;
  std::size_t codebook_dim = 16;
  std::size_t frame_dim = 16;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 512;
  /// Shared character softmax reuses the text input embedding as its weight.
  bool tie_embeddings = true;
  double gumbel_start = 2.0;
  double gumbel_min = 0.5;
  double gumbel_decay = 0.999;

  void validate() const;
  double gumbel_temperature(std::uint64_t step) const;
};

/// "desk", "paper-600m", "paper-2b".
ModelConfig model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

/// Exact parameter count of a model built from `cfg`, without building it.
std::size_t parameter_count(const ModelConfig& cfg);

enum class Modality { kSpeech, kText };

/// Per-position encoder output plus the bookkeeping that routes losses.
struct EncoderOutput {
  Tensor contrastive;  // [B, T, dim] output of the contrastive block
  Tensor hidden;       // [B, T, dim] output of the MLM block
  /// Subsampled speech features before masking, [B, S, dim]; undefined for text.
  Tensor speech_features;
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::size_t speech_max = 0;
  std::vector<std::size_t> lengths;
  /// Speech positions per item: equal to lengths for speech input, 0 for text.
  std::vector<std::size_t> boundary;

  Modality modality(std::size_t b, std::size_t t) const {
    return t < boundary.at(b) ? Modality::kSpeech : Modality::kText;
  }
  bool valid(std::size_t b, std::size_t t) const { return t < lengths.at(b); }
  /// Flat row of (b, t) in a [B * T, dim] view of contrastive/hidden.
  std::int64_t row(std::size_t b, std::size_t t) const {
    return static_cast<std::int64_t>(b * max_len + t);
  }
};

enum class QuantizerMode {
  kTrain,  // Gumbel noise, hard one-hot forward, straight-through backward
  kSoft,   // Gumbel noise, soft relaxation forward and backward (differentiable surrogate)
  kEval,   // deterministic argmax, no noise
};

struct QuantizerOutput {
  std::vector<int> ids;
  Tensor probs;    // [N, codebook_size] noise-free softmax, for the diversity term
  Tensor vectors;  // [N, codebook_dim]
};

/// The output projection over characters shared by text MLM, TLM and CTC.
struct SharedSoftmax {
  Tensor weight;  // [vocab, dim]
  Tensor bias;    // [vocab]
  Tensor log_probs(const Tensor& h) const { return log_softmax(add(matmul(h, weight, true), bias)); }
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  /// Independent copy with identical parameter values.
  std::unique_ptr<Model> clone() const;
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Output length of the subsampler for `frames` input frames.
  std::size_t subsampled_length(std::size_t frames) const;

  /// Masks index subsampled positions. An empty `masks` vector means no masking.
  EncoderOutput encode_speech(const std::vector<const FrameSeq*>& frames,
                              const std::vector<MaskPlan>& masks) const;
  /// Masked positions are replaced by the mask token before embedding.
  EncoderOutput encode_text(const std::vector<std::vector<int>>& ids,
                            const std::vector<MaskPlan>& masks) const;
  /// Speech positions first, then text positions, jointly encoded.
  EncoderOutput encode_paired(const std::vector<const FrameSeq*>& frames,
                              const std::vector<std::vector<int>>& ids,
                              const std::vector<MaskPlan>& speech_masks,
                              const std::vector<MaskPlan>& text_masks) const;

  /// features [N, dim] -> one codebook id per row.
  QuantizerOutput quantize(const Tensor& features, QuantizerMode mode, double temperature,
                           std::mt19937_64& rng) const;

  const SharedSoftmax& ctc_head() const { return softmax_; }
  const SharedSoftmax& mlm_head() const { return softmax_; }
  /// Projects contrastive-block outputs into codebook space.
  const Linear& contrastive_projection() const { return contrastive_proj_; }
  /// Predicts codebook ids from MLM-block outputs at masked speech positions.
  const Linear& speech_mlm_head() const { return speech_head_; }
  const Tensor& text_embedding() const { return text_embedding_; }
  const Tensor& mask_embedding() const { return mask_embedding_; }
  const Tensor& codebook() const { return codebook_; }

  /// Parameters that only text input or the character softmax can reach.
  std::vector<std::string> text_only_parameters() const;

 private:
  Tensor subsample(const std::vector<const FrameSeq*>& frames, std::vector<std::size_t>& lengths) const;
  Tensor embed_text(const std::vector<std::vector<int>>& ids, const std::vector<MaskPlan>& masks,
                    std::vector<std::size_t>& lengths) const;
  Tensor apply_speech_mask(const Tensor& features, const std::vector<MaskPlan>& masks,
                           const std::vector<std::size_t>& lengths) const;
  void run_stack(EncoderOutput& out, const Tensor& x) const;

  ModelConfig cfg_;
  ParamSet params_;
  std::vector<Tensor> sub_w_;  // strided conv weights
  std::vector<Tensor> sub_b_;
  Linear input_proj_;
  Tensor mask_embedding_;
  Tensor text_embedding_;
  std::vector<ConformerBlock> contrastive_blocks_;
  std::vector<ConformerBlock> mlm_blocks_;
  Linear quantizer_logits_;
  Tensor codebook_;
  Linear contrastive_proj_;
  Linear speech_head_;
  SharedSoftmax softmax_;
};

}  // namespace jst
