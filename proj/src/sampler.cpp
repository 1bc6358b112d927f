#include "jst/sampler.hpp"

namespace jst {

LanguageDistribution language_weights(const std::map<std::string, std::size_t>& counts,
                                      double temperature) {
  if (counts.empty()) throw Error("language_weights: no languages given");
  if (!(temperature > 0)) throw Error("language_weights: temperature must be positive");
  double total = 0.0;
  for (const auto& [lang, n] : counts) {
    if (n == 0) throw Error("language_weights: language '" + lang + "' has zero examples");
    total += static_cast<double>(n);
  }
  LanguageDistribution dist;
  double z = 0.0;
  for (const auto& [lang, n] : counts) {
    const double w = std::pow(static_cast<double>(n) / total, 1.0 / temperature);
    dist[lang] = w;
    z += w;
  }
  for (auto& [lang, p] : dist) p /= z;
  return dist;
}

namespace {

std::vector<std::uint8_t> padding_rows(const std::vector<std::size_t>& lengths, std::size_t max_len) {
  std::vector<std::uint8_t> pad(lengths.size() * max_len, 0);
  for (std::size_t i = 0; i < lengths.size(); ++i)
    for (std::size_t t = lengths[i]; t < max_len; ++t) pad[i * max_len + t] = 1;
  return pad;
}

std::size_t max_of(const std::vector<std::size_t>& v) {
  std::size_t m = 0;
  for (auto x : v) m = std::max(m, x);
  return m;
}

}  // namespace

TriModalBatch compose_batch(LanguageStream<SpeechUtterance>* speech,
                            LanguageStream<EncodedText>* text,
                            LanguageStream<PairedExample>* paired, const BatchSizes& sizes,
                            const CharVocab& vocab) {
  if ((sizes.speech && !speech) || (sizes.text && !text) || (sizes.paired && !paired)) {
    throw Error("compose_batch: a requested stream is missing");
  }
  TriModalBatch batch;
  for (std::size_t i = 0; i < sizes.speech; ++i) {
    batch.speech.push_back(speech->next());
    batch.speech_lengths.push_back(batch.speech.back().frames.count);
  }
  for (std::size_t i = 0; i < sizes.text; ++i) {
    batch.text.push_back(text->next());
    batch.text_lengths.push_back(batch.text.back().ids.size());
  }
  for (std::size_t i = 0; i < sizes.paired; ++i) {
    batch.paired.push_back(paired->next());
    const auto& p = batch.paired.back();
    batch.paired_lengths.push_back(p.frames.count + vocab.encode(p.transcript).size());
  }
  batch.speech_max = max_of(batch.speech_lengths);
  batch.text_max = max_of(batch.text_lengths);
  batch.paired_max = max_of(batch.paired_lengths);
  batch.speech_padding = padding_rows(batch.speech_lengths, batch.speech_max);
  batch.text_padding = padding_rows(batch.text_lengths, batch.text_max);
  batch.paired_padding = padding_rows(batch.paired_lengths, batch.paired_max);
  return batch;
}

}  // namespace jst
