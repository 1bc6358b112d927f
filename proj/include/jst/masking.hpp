#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace jst {

enum class MaskReplacement { kMaskToken, kMaskEmbedding };

/// Masked positions of one sequence, sorted and unique.
struct MaskPlan {
  std::vector<std::size_t> positions;
  MaskReplacement replacement = MaskReplacement::kMaskToken;

  bool empty() const { return positions.empty(); }
  std::size_t size() const { return positions.size(); }
  bool contains(std::size_t pos) const;
  /// Dense 0/1 view over `len` positions.
  std::vector<std::uint8_t> dense(std::size_t len) const;
};

inline constexpr std::size_t kTextSpan = 20;
inline constexpr double kTextMaskRatio = 0.15;
inline constexpr double kSpeechStartProb = 0.065;
inline constexpr std::size_t kSpeechSpan = 10;

/// Number of text spans: max(1, round(ratio * len / span)), reduced only when
/// that many clamped spans cannot fit without overlap.
std::size_t text_span_count(std::size_t len, std::size_t span_len, double ratio);

/// Non-overlapping spans of min(span_len, len) positions at uniformly drawn
/// starts. Masked positions become the mask token.
MaskPlan mask_text_spans(std::size_t len, std::size_t span_len, double ratio, std::uint64_t seed);

/// Every frame starts a span with probability start_prob; each span covers
/// span_len frames (clamped at the end); overlaps merge.
MaskPlan mask_speech_frames(std::size_t len, double start_prob, std::size_t span_len,
                            std::uint64_t seed);

// Padding-aware variants: `padding[i] != 0` marks a padded position. Spans are
// drawn over the leading valid prefix, and nothing lands on padding.
MaskPlan mask_text_spans(std::span<const std::uint8_t> padding, std::size_t span_len, double ratio,
                         std::uint64_t seed);
MaskPlan mask_speech_frames(std::span<const std::uint8_t> padding, double start_prob,
                            std::size_t span_len, std::uint64_t seed);

}  // namespace jst
