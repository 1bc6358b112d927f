#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/rng.hpp"
#include "jst/tensor.hpp"
#include "jst/vocab.hpp"

namespace jst {

using LanguageDistribution = std::map<std::string, double>;

inline constexpr double kDefaultTemperature = 3.0;

/// p_l proportional to (n_l / sum n)^(1/T). Larger T flattens toward uniform.
LanguageDistribution language_weights(const std::map<std::string, std::size_t>& counts,
                                      double temperature = kDefaultTemperature);

/// Infinite deterministic stream: a language is drawn per example from the
/// distribution, and each language's records cycle in freshly shuffled epochs.
/// The stream is a pure function of (records, distribution, seed, position).
template <typename R>
class LanguageStream {
 public:
  LanguageStream(std::map<std::string, std::vector<R>> by_language, LanguageDistribution dist,
                 std::uint64_t seed)
      : by_language_(std::move(by_language)), dist_(std::move(dist)), seed_(seed) {
    if (dist_.empty()) throw Error("language stream needs a non-empty distribution");
    for (const auto& [lang, p] : dist_) {
      auto it = by_language_.find(lang);
      if (it == by_language_.end() || it->second.empty()) {
        throw Error("language '" + lang + "' has no records");
      }
      languages_.push_back(lang);
      cumulative_.push_back((cumulative_.empty() ? 0.0 : cumulative_.back()) + p);
    }
    reset();
  }

  const R& next() {
    const double u = uniform01(rng_) * cumulative_.back();
    std::size_t li = 0;
    while (li + 1 < cumulative_.size() && u >= cumulative_[li]) ++li;
    auto& lane = lanes_[li];
    const auto& records = by_language_.at(languages_[li]);
    if (lane.cursor == lane.order.size()) {
      lane.order.resize(records.size());
      for (std::size_t i = 0; i < records.size(); ++i) lane.order[i] = i;
      std::mt19937_64 perm(derive_seed(seed_, {li, lane.epoch}));
      shuffle_in_place(lane.order, perm);
      ++lane.epoch;
      lane.cursor = 0;
    }
    ++position_;
    return records[lane.order[lane.cursor++]];
  }

  std::uint64_t position() const { return position_; }

  /// Rewinds and replays to absolute position `n`.
  void seek(std::uint64_t n) {
    reset();
    while (position_ < n) next();
  }

  const LanguageDistribution& distribution() const { return dist_; }

 private:
  struct Lane {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
  };

  void reset() {
    rng_.seed(derive_seed(seed_, {0x73747265616dULL}));
    lanes_.assign(languages_.size(), Lane{});
    position_ = 0;
  }

  std::map<std::string, std::vector<R>> by_language_;
  LanguageDistribution dist_;
  std::uint64_t seed_;
  std::vector<std::string> languages_;
  std::vector<double> cumulative_;
  std::vector<Lane> lanes_;
  std::mt19937_64 rng_;
  std::uint64_t position_ = 0;
};

template <typename R>
std::map<std::string, std::vector<R>> group_by_language(const std::vector<R>& records) {
  std::map<std::string, std::vector<R>> out;
  for (const auto& r : records) out[r.language].push_back(r);
  return out;
}

template <typename R>
std::map<std::string, std::size_t> count_by_language(const std::vector<R>& records) {
  std::map<std::string, std::size_t> out;
  for (const auto& r : records) ++out[r.language];
  return out;
}

/// Convenience: groups records and builds the temperature distribution.
template <typename R>
std::unique_ptr<LanguageStream<R>> make_stream(const std::vector<R>& records, double temperature,
                                               std::uint64_t seed) {
  if (records.empty()) return nullptr;
  return std::make_unique<LanguageStream<R>>(
      group_by_language(records), language_weights(count_by_language(records), temperature), seed);
}

struct EncodedText {
  std::string id;
  std::string language;
  std::vector<int> ids;
};

struct BatchSizes {
  std::size_t speech = 0;
  std::size_t text = 0;
  std::size_t paired = 0;
};

inline constexpr BatchSizes kPaperBatchSizes{2048, 8192, 256};

/// One training step's input across the three data kinds.
struct TriModalBatch {
  std::vector<SpeechUtterance> speech;
  std::vector<EncodedText> text;
  std::vector<PairedExample> paired;

  std::vector<std::size_t> speech_lengths;  // frames
  std::vector<std::size_t> text_lengths;    // characters
  std::vector<std::size_t> paired_lengths;  // frames + characters

  /// Row-major [items x per-stream max length]; 1 marks padding.
  std::vector<std::uint8_t> speech_padding;
  std::vector<std::uint8_t> text_padding;
  std::vector<std::uint8_t> paired_padding;
  std::size_t speech_max = 0;
  std::size_t text_max = 0;
  std::size_t paired_max = 0;
};

/// Pulls exactly sizes.{speech,text,paired} items. A stream may be null only
/// when its size is zero.
TriModalBatch compose_batch(LanguageStream<SpeechUtterance>* speech,
                            LanguageStream<EncodedText>* text,
                            LanguageStream<PairedExample>* paired, const BatchSizes& sizes,
                            const CharVocab& vocab);

}  // namespace jst
