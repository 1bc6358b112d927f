#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "jst/masking.hpp"
#include "jst/model.hpp"
#include "jst/tensor.hpp"

namespace jst {

struct LossWeights {
  double speech = 1.0;
  double text = 0.3;
  double paired_ctc = 0.03;
  double tlm = 1.0;
  double mt_weight = 5.0;

  void validate() const;
};

/// Log-alpha lattice: frames x (2 * |target| + 1), blank-interleaved target.
struct CtcTable {
  std::size_t frames = 0;
  std::size_t states = 0;
  std::vector<int> extended;
  std::vector<double> log_alpha;

  double at(std::size_t t, std::size_t s) const { return log_alpha[t * states + s]; }
};

/// Minimum frame count: one frame per label plus one blank between repeats.
std::size_t ctc_min_frames(std::span<const int> target);

CtcTable ctc_forward(std::span<const double> log_probs, std::size_t frames, std::size_t vocab,
                     std::span<const int> target, int blank);

struct CtcResult {
  Tensor loss;  // scalar; +inf when infeasible
  bool feasible = true;
};

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// [frames, vocab], summed over all alignments.
CtcResult ctc_loss(const Tensor& log_probs, std::span<const int> target, int blank);

/// Merge adjacent repeats, then drop blanks.
std::vector<int> ctc_collapse(std::span<const int> path, int blank);

/// Negative log-likelihood by enumerating all vocab^frames paths (+inf when no
/// path collapses to the target). For small oracle checks only.
double ctc_brute_force(std::span<const double> log_probs, std::size_t frames, std::size_t vocab,
                       std::span<const int> target, int blank);

struct ContrastiveOptions {
  std::size_t n_distractors = 8;
  double temperature = 0.1;
  double diversity_weight = 0.1;
};

struct ContrastiveResult {
  Tensor loss;         // contrastive + diversity_weight * diversity
  Tensor contrastive;  // mean InfoNCE over masked positions
  Tensor diversity;    // undefined when no codebook probabilities were given
  std::size_t distractors = 0;
  /// Fewer candidates than requested; all available were used.
  bool too_few = false;
};

/// Distractor indices for each of n rows, drawn without replacement from the
/// other rows.
std::vector<std::vector<std::size_t>> sample_distractors(std::size_t n, std::size_t k,
                                                         std::mt19937_64& rng);

/// context, targets [N, dim]. Cosine similarity over temperature, positive in
/// slot 0, distractors from other masked positions.
ContrastiveResult contrastive_loss(const Tensor& context, const Tensor& targets,
                                   const std::vector<std::vector<std::size_t>>& distractors,
                                   double temperature);
ContrastiveResult contrastive_loss(const Tensor& context, const Tensor& targets,
                                   const Tensor& codebook_probs, const ContrastiveOptions& opts,
                                   std::mt19937_64& rng);

/// (V - exp(H(mean probs))) / V; 0 when codebook usage is uniform.
Tensor diversity_loss(const Tensor& codebook_probs);

/// Mean NLL of targets at the given rows [N, V]; N must be positive.
Tensor mlm_loss(const Tensor& log_probs, std::span<const int> targets);

struct PairedTargets {
  std::vector<std::vector<int>> transcripts;  // unmasked character ids
  std::vector<MaskPlan> text_masks;
  std::vector<MaskPlan> speech_masks;  // subsampled positions
  /// Codebook ids for masked speech positions in (item, position) order.
  std::vector<int> speech_codes;
};

struct PairedLossOptions {
  bool tlm_speech = true;
  bool compute_ctc = true;
};

struct PairedLoss {
  Tensor tlm_text;
  Tensor tlm_speech;
  Tensor ctc;
  std::size_t ctc_positions = 0;  // speech positions fed to CTC
  bool ctc_feasible = true;
  Tensor tlm() const;
};

PairedLoss paired_loss(const Model& model, const EncoderOutput& out, const PairedTargets& targets,
                       const PairedLossOptions& opts = {});

/// Rows of a [B, T, d] encoder tensor at (b, t) pairs, as [N, d].
Tensor gather_positions(const Tensor& x,
                        const std::vector<std::pair<std::size_t, std::size_t>>& positions);

}  // namespace jst
