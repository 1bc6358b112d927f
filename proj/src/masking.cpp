#include "jst/masking.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "jst/rng.hpp"
#include "jst/tensor.hpp"

namespace jst {

bool MaskPlan::contains(std::size_t pos) const {
  return std::binary_search(positions.begin(), positions.end(), pos);
}

std::vector<std::uint8_t> MaskPlan::dense(std::size_t len) const {
  std::vector<std::uint8_t> out(len, 0);
  for (auto p : positions) {
    if (p >= len) throw Error("mask position " + std::to_string(p) + " outside length " + std::to_string(len));
    out[p] = 1;
  }
  return out;
}

std::size_t text_span_count(std::size_t len, std::size_t span_len, double ratio) {
  if (len == 0) return 0;
  span_len = std::max<std::size_t>(span_len, 1);
  const auto wanted = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(len) / static_cast<double>(span_len)));
  const std::size_t eff = std::min(span_len, len);
  return std::min(std::max<std::size_t>(1, wanted), len / eff);
}

MaskPlan mask_text_spans(std::size_t len, std::size_t span_len, double ratio, std::uint64_t seed) {
  MaskPlan plan;
  plan.replacement = MaskReplacement::kMaskToken;
  if (len == 0) return plan;
  span_len = std::max<std::size_t>(span_len, 1);
  const std::size_t n = text_span_count(len, span_len, ratio);
  const std::size_t eff = std::min(span_len, len);
  const std::size_t free = len - n * eff;

  // Pick n sorted distinct slots out of free + n (selection sampling), then
  // spread them so consecutive spans cannot touch each other's positions.
  std::mt19937_64 rng(derive_seed(seed, {0x74657874ULL, len}));
  std::vector<std::size_t> slots;
  const std::size_t pool = free + n;
  std::size_t needed = n;
  for (std::size_t s = 0; s < pool && needed > 0; ++s) {
    if (uniform01(rng) * static_cast<double>(pool - s) < static_cast<double>(needed)) {
      slots.push_back(s);
      --needed;
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::size_t start = slots[i] + i * (eff - 1);
    for (std::size_t k = 0; k < eff; ++k) plan.positions.push_back(start + k);
  }
  return plan;
}

MaskPlan mask_speech_frames(std::size_t len, double start_prob, std::size_t span_len,
                            std::uint64_t seed) {
  MaskPlan plan;
  plan.replacement = MaskReplacement::kMaskEmbedding;
  std::mt19937_64 rng(derive_seed(seed, {0x737065656368ULL, len}));
  std::size_t covered_until = 0;
  for (std::size_t t = 0; t < len; ++t) {
    if (uniform01(rng) < start_prob) covered_until = std::max(covered_until, std::min(len, t + span_len));
    if (t < covered_until) plan.positions.push_back(t);
  }
  return plan;
}

namespace {

std::size_t valid_prefix(std::span<const std::uint8_t> padding) {
  std::size_t n = 0;
  while (n < padding.size() && !padding[n]) ++n;
  return n;
}

MaskPlan drop_padding(MaskPlan plan, std::span<const std::uint8_t> padding) {
  std::erase_if(plan.positions, [&](std::size_t p) { return p >= padding.size() || padding[p]; });
  return plan;
}

}  // namespace

MaskPlan mask_text_spans(std::span<const std::uint8_t> padding, std::size_t span_len, double ratio,
                         std::uint64_t seed) {
  return drop_padding(mask_text_spans(valid_prefix(padding), span_len, ratio, seed), padding);
}

MaskPlan mask_speech_frames(std::span<const std::uint8_t> padding, double start_prob,
                            std::size_t span_len, std::uint64_t seed) {
  return drop_padding(mask_speech_frames(valid_prefix(padding), start_prob, span_len, seed), padding);
}

}  // namespace jst
