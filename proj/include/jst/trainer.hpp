#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/losses.hpp"
#include "jst/model.hpp"
#include "jst/sampler.hpp"
#include "jst/vocab.hpp"

namespace jst {

enum class Variant { kMslamCtc, kMslamTlm, kSpeechOnly, kMslamCtcNoText };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);
std::vector<Variant> all_variants();

struct TrainConfig {
  std::size_t warmup_steps = 40000;
  double peak_lr = 6e-4;
  std::size_t total_steps = 1000;
  BatchSizes batch = kPaperBatchSizes;
  LossWeights weights;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  Variant variant = Variant::kMslamCtc;
  double sampling_temperature = kDefaultTemperature;

  std::size_t text_span = kTextSpan;
  double text_mask_ratio = kTextMaskRatio;
  double speech_start_prob = kSpeechStartProb;
  /// In subsampled positions.
  std::size_t speech_span = kSpeechSpan;
  ContrastiveOptions contrastive;
  /// Masked speech prediction on paired input as part of TLM.
  bool tlm_speech = true;
  /// kTrain (straight-through) for training; kSoft makes the step loss a
  /// smooth function of every parameter, for finite-difference checks.
  QuantizerMode quantizer_mode = QuantizerMode::kTrain;

  void validate() const;
  /// Stream sizes after the variant's ablation is applied.
  BatchSizes effective_batch() const;
  /// CTC coefficient after the variant's ablation is applied.
  double effective_ctc_weight() const;
};

/// "paper-600m" (also the default), "paper-2b", or the scaled-down "desk".
TrainConfig train_preset(const std::string& name);

/// peak * min(step / warmup, sqrt(warmup / step)), step >= 1.
double lr_schedule(std::uint64_t step, std::uint64_t warmup, double peak);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// Bias-corrected Adam update applied in place.
void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, double beta1, double beta2, double eps);

/// Scales grads so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct StepLosses {
  std::uint64_t step = 0;
  double lr = 0;
  double total = 0;
  double contrastive = 0;
  double speech_mlm = 0;
  double text_mlm = 0;
  double tlm = 0;
  double ctc = 0;
  double grad_norm = 0;

  bool operator==(const StepLosses&) const = default;
};

std::string format_log_line(const StepLosses& s);
std::string log_header();

struct TrainData {
  std::vector<SpeechUtterance> speech;
  std::vector<TextSentence> text;
  std::vector<PairedExample> paired;
};

/// Scalar loss graph of one step, before the optimizer runs.
struct StepGraph {
  Tensor total;
  StepLosses values;
  bool contrastive_too_few = false;
};

class Trainer {
 public:
  Trainer(Model& model, const CharVocab& vocab, const TrainData& data, TrainConfig cfg);

  /// Draws the next batch from the three streams.
  TriModalBatch next_batch();
  /// Loss graph of `batch` at step `step` (1-based). Pure: every random draw
  /// is derived from (seed, step), and nothing is updated.
  StepGraph build_step(const TriModalBatch& batch, std::uint64_t step) const;
  /// One optimizer step; returns the logged components.
  StepLosses step();
  void run(std::uint64_t steps, std::ostream* log = nullptr);

  std::uint64_t step_count() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<StepLosses>& history() const { return history_; }
  /// Draw counts of the speech, text and paired streams.
  std::vector<std::uint64_t> sampler_positions() const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  Model& model_;
  const CharVocab& vocab_;
  TrainConfig cfg_;
  std::unique_ptr<LanguageStream<SpeechUtterance>> speech_;
  std::unique_ptr<LanguageStream<EncodedText>> text_;
  std::unique_ptr<LanguageStream<PairedExample>> paired_;
  std::vector<Tensor> params_;
  AdamState adam_;
  std::uint64_t step_ = 0;
  std::vector<StepLosses> history_;
};

}  // namespace jst
