#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "jst/config.hpp"
#include "jst/evalkit.hpp"
#include "jst/probe.hpp"
#include "jst/trainer.hpp"

namespace jst {

/// Everything the desk-scale comparison of pretraining variants needs.
struct ExperimentConfig {
  SynthSpec synth;
  /// Unlabeled speech and text sentences per language.
  std::size_t sentences = 400;
  /// Held-out paired examples per paired language for the probe.
  std::size_t probe_eval_per_language = 32;
  ModelConfig model;
  TrainConfig train;
  std::size_t pretrain_steps = 1500;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<Variant> variants = all_variants();
  KeywordTaskSpec task;
  ClassifierConfig classifier;
  ProbeConfig probe;
  /// Variants that get a CTC probe.
  std::vector<Variant> probe_variants{Variant::kMslamCtc, Variant::kMslamTlm};
};

/// Desk defaults: 3 languages over one script, 2 with paired data, 8-way
/// keyword classification.
ExperimentConfig desk_experiment();
/// desk_experiment() with model.* / train.* / loss.* / mask.* / synth.* and
/// experiment.* / finetune.* / probe.* overrides.
ExperimentConfig experiment_config_from(const Config& c);

struct CorpusBundle {
  TrainData data;
  CharVocab vocab;
  std::vector<PairedExample> probe_eval;
};

CorpusBundle build_corpus(const ExperimentConfig& cfg, std::uint64_t seed);

/// Pre-trains one variant; the model vocabulary is resized to the corpus vocab.
std::unique_ptr<Model> pretrain(const ExperimentConfig& cfg, const CorpusBundle& corpus, Variant variant,
                                std::uint64_t seed, std::vector<StepLosses>* history = nullptr,
                                std::ostream* log = nullptr);

struct VariantSeedResult {
  Variant variant = Variant::kMslamCtc;
  std::uint64_t seed = 0;
  TransferMatrix matrix;
  bool probed = false;
  ProbeResult probe;
  bool probe_hash_unchanged = true;
  double final_loss = 0;
};

struct VariantSummary {
  TransferMatrix mean;
  double asr_cer = 0;
  double cae_cer = 0;
  bool probed = false;
};

struct ExperimentReport {
  std::vector<VariantSeedResult> runs;
  std::map<Variant, VariantSummary> summary;
  double seconds = 0;

  /// Per-run rows then per-variant means.
  std::string tsv() const;
};

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

}  // namespace jst
