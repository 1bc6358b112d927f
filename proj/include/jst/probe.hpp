#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/layers.hpp"
#include "jst/model.hpp"
#include "jst/vocab.hpp"

namespace jst {

/// Per-frame argmax (ties to the lowest id), merge repeats, drop blanks.
std::vector<int> greedy_ctc_ids(std::span<const double> log_probs, std::size_t frames,
                                std::size_t vocab, int blank);
std::string greedy_ctc_decode(const Tensor& log_probs, const CharVocab& vocab, int blank = kBlankId);

/// Levenshtein distance over Unicode scalar values.
std::size_t edit_distance(std::u32string_view a, std::u32string_view b);
/// edit_distance / reference length; the reference must be non-empty.
double cer(const std::string& hypothesis, const std::string& reference);

enum class ProbeInit {
  kZero,        // uniform output distribution
  kPretrained,  // copy of the encoder's shared character softmax
};

struct ProbeConfig {
  ProbeInit init = ProbeInit::kZero;
  std::size_t steps = 400;
  std::size_t batch = 16;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

/// Character softmax trained on top of a frozen encoder.
struct CtcProbe {
  ParamSet params;
  Linear head;  // model_dim -> vocab
  std::vector<double> loss_trace;

  Tensor log_probs(const Tensor& hidden) const { return log_softmax(head(hidden)); }
};

/// Fits only the probe softmax with CTC on speech input. Throws if any
/// encoder parameter changes.
CtcProbe fit_ctc_probe(const Model& encoder, const CharVocab& vocab,
                       const std::vector<PairedExample>& data, const ProbeConfig& cfg);

struct DecodeSample {
  std::string language;
  Modality modality = Modality::kSpeech;
  std::string reference;
  std::string hypothesis;
};

struct ProbeResult {
  std::map<std::string, double> asr_cer;  // speech input
  std::map<std::string, double> cae_cer;  // text input
  std::vector<DecodeSample> samples;

  double mean_asr() const;
  double mean_cae() const;
  /// "lang<TAB>asr_cer<TAB>cae_cer" rows followed by sampled decodes.
  std::string report() const;
};

/// Decodes `data` with the chosen input modality and fills the matching CER
/// column (corpus-level per language: total edits / total reference chars).
void run_probe(const CtcProbe& probe, const Model& encoder, const CharVocab& vocab,
               const std::vector<PairedExample>& data, Modality modality, ProbeResult& result,
               std::size_t samples_per_language = 2);

}  // namespace jst
