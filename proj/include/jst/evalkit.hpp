#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/layers.hpp"
#include "jst/model.hpp"
#include "jst/vocab.hpp"

namespace jst {

/// One classification example carrying both input modalities.
struct LabeledExample {
  std::string id;
  std::string language;
  FrameSeq frames;
  std::string text;
  int label = 0;
};

struct LabeledSplits {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> dev;
  std::vector<LabeledExample> test;
  std::size_t classes = 0;
};

struct KeywordTaskSpec {
  std::size_t classes = 8;
  std::vector<std::string> languages{"l0", "l1"};
  std::size_t train_per_class = 16;
  std::size_t dev_per_class = 8;
  std::size_t test_per_class = 8;
};

/// Keyword spotting: each class owns a marker character inserted once into a
/// filler sentence that never contains any marker.
LabeledSplits make_keyword_task(const SynthSpec& synth, const KeywordTaskSpec& task, std::uint64_t seed);

/// Labels drawn independently of the input; a chance-level control.
LabeledSplits make_random_label_task(const SynthSpec& synth, std::size_t classes,
                                     std::size_t train, std::size_t dev, std::size_t test,
                                     std::uint64_t seed);

/// Language identification over the languages of `synth`.
LabeledSplits make_language_id_task(const SynthSpec& synth, std::size_t per_language_train,
                                    std::size_t per_language_eval, std::uint64_t seed);

/// Encodes a batch of labeled examples in one modality.
EncoderOutput encode_examples(const Model& encoder, const CharVocab& vocab,
                              const std::vector<const LabeledExample*>& batch, Modality modality);

/// Optional per-position projection, max-pool over valid positions, softmax.
struct ClassifierHead {
  ParamSet params;
  std::optional<Linear> projection;
  Linear output;

  ClassifierHead(std::size_t dim, std::size_t classes, bool project, std::mt19937_64& rng);
  Tensor logits(const EncoderOutput& out) const;
};

struct ClassifierGridPoint {
  std::size_t batch = 16;
  double lr = 2e-5;
  bool projection = false;
  std::size_t epochs = 100;
  std::string str() const;
};

struct ClassifierGrid {
  std::vector<std::size_t> batch_sizes{16, 32, 64};
  std::vector<double> lrs{2e-6, 4e-6, 2e-5, 4e-5};
  std::vector<bool> projections{false, true};
  std::vector<std::size_t> epochs{100, 300};
  /// Divides every epoch count (rounded up) for desk-scale runs.
  std::size_t epoch_divisor = 1;

  std::vector<ClassifierGridPoint> points() const;
};

struct ClassifierConfig {
  ClassifierGrid grid;
  bool train_encoder = true;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct ClassifierResult {
  ClassifierGridPoint best;
  double dev_accuracy = 0;
  double test_accuracy = 0;
  std::vector<std::pair<ClassifierGridPoint, double>> dev_scores;
  std::unique_ptr<Model> encoder;
  std::unique_ptr<ClassifierHead> head;
};

double classifier_accuracy(const Model& encoder, const ClassifierHead& head, const CharVocab& vocab,
                           const std::vector<LabeledExample>& data, Modality modality);

/// Trains a fresh head (and a copy of the encoder when train_encoder) for each
/// grid point on `modality` input; picks the best dev score, ties going to the
/// earlier grid point; reports test accuracy of that run.
ClassifierResult finetune_classifier(const Model& pretrained, const CharVocab& vocab,
                                     const LabeledSplits& data, Modality modality,
                                     const ClassifierConfig& cfg);

/// Scores indexed by (fine-tune modality, eval modality).
struct TransferMatrix {
  double ss = 0, st = 0, ts = 0, tt = 0;
  double chance = 0;
  std::string tsv(const std::string& label) const;
  static std::string tsv_header();
};

TransferMatrix zero_shot_eval(const Model& pretrained, const CharVocab& vocab, const LabeledSplits& data,
                              const ClassifierConfig& cfg);

/// Seeded character bijection over `inventory` followed by reversal; the
/// desk stand-in for translation.
class TranslationStandIn {
 public:
  TranslationStandIn(std::u32string inventory, std::uint64_t seed);
  std::string operator()(const std::string& text) const;

 private:
  std::map<char32_t, char32_t> map_;
};

struct SpeechTranslationExample {
  FrameSeq frames;
  std::string target;
};

struct TextTranslationExample {
  std::string source;
  std::string target;
};

struct Seq2SeqConfig {
  std::size_t layers = 6;
  std::size_t dim = 512;
  std::size_t heads = 8;
  std::size_t ff_dim = 2048;
  std::size_t max_relative = 16;
  double dropout_st = 0.3;
  double dropout_joint = 0.1;
  double mt_weight = 5.0;
  std::size_t steps = 1000;
  std::size_t batch = 16;
  double lr = 1e-3;
  double clip_norm = 1.0;
  bool train_encoder = true;
  std::size_t max_decode = 64;
  std::uint64_t seed = 0;
};

/// Transformer decoder with causal self-attention and cross-attention to the
/// encoder output.
class Seq2SeqHead {
 public:
  Seq2SeqHead(const Seq2SeqConfig& cfg, std::size_t encoder_dim, std::size_t vocab, std::uint64_t seed);

  ParamSet& params() { return params_; }
  /// Teacher-forced mean token cross-entropy of `targets` (eos appended).
  Tensor loss(const EncoderOutput& memory, const std::vector<std::vector<int>>& targets, double dropout,
              std::mt19937_64& rng) const;
  /// Greedy decoding for item b of `memory`, without bos/eos.
  std::vector<int> greedy(const EncoderOutput& memory, std::size_t b, std::size_t max_len) const;

 private:
  Tensor decode(const Tensor& memory, const std::vector<std::size_t>& memory_lengths,
                const std::vector<std::vector<int>>& inputs, double dropout, std::mt19937_64* rng) const;

  struct Layer {
    LayerNorm self_norm;
    MultiHeadAttention self_attn;
    LayerNorm cross_norm;
    MultiHeadAttention cross_attn;
    FeedForward ff;
  };
  Seq2SeqConfig cfg_;
  ParamSet params_;
  Tensor embedding_;
  std::vector<Layer> layers_;
  LayerNorm out_norm_;
  Linear output_;
};

struct Seq2SeqMetrics {
  double token_accuracy = 0;
  double exact_match = 0;
};

struct Seq2SeqResult {
  Seq2SeqMetrics metrics;
  std::vector<double> loss_trace;
  std::unique_ptr<Model> encoder;
  std::unique_ptr<Seq2SeqHead> head;
};

/// ST alone, or ST+MT with equal example counts per step and MT loss scaled
/// by mt_weight. Metrics come from greedy decoding of `eval` speech inputs.
Seq2SeqResult finetune_seq2seq(const Model& pretrained, const CharVocab& vocab,
                               const std::vector<SpeechTranslationExample>& st,
                               const std::vector<TextTranslationExample>& mt,
                               const std::vector<SpeechTranslationExample>& eval,
                               const Seq2SeqConfig& cfg);

Seq2SeqMetrics seq2seq_metrics(const Model& encoder, const Seq2SeqHead& head, const CharVocab& vocab,
                               const std::vector<SpeechTranslationExample>& eval, std::size_t max_decode);

}  // namespace jst
