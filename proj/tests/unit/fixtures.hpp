#pragma once

#include <utility>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/model.hpp"
#include "jst/trainer.hpp"
#include "jst/vocab.hpp"

namespace fixtures {

struct Tiny {
  jst::SynthSpec synth;
  jst::TrainData data;
  jst::CharVocab vocab;
  jst::ModelConfig model;
  jst::TrainConfig train;
};

inline Tiny tiny_setup(std::uint64_t seed = 1) {
  Tiny t;
  t.synth.languages = {"l0", "l1"};
  t.synth.chars_per_language = 8;
  t.synth.frames_per_char = 4;
  t.synth.frame_dim = 6;
  t.synth.paired_per_language = 6;
  t.synth.min_chars = 3;
  t.synth.max_chars = 5;
  auto corpus = jst::generate_synth(t.synth, 8, seed);
  t.data = {corpus.speech, corpus.text, corpus.paired};
  std::vector<std::pair<std::string, std::string>> texts;
  for (const auto& s : corpus.text) texts.emplace_back(s.language, s.text);
  t.vocab = jst::CharVocab::build(texts, 16);

  t.model = jst::model_preset("desk");
  t.model.model_dim = 8;
  t.model.ff_dim = 16;
  t.model.heads = 2;
  t.model.max_relative = 3;
  t.model.codebook_size = 6;
  t.model.codebook_dim = 4;
  t.model.frame_dim = 6;
  t.model.vocab_size = 16;
  t.model.subsample_factor = 2;

  t.train.warmup_steps = 5;
  t.train.peak_lr = 1e-2;
  t.train.batch = {3, 4, 2};
  t.train.text_span = 2;
  t.train.speech_span = 2;
  t.train.speech_start_prob = 0.3;
  t.train.contrastive.n_distractors = 2;
  t.train.seed = seed;
  return t;
}

}  // namespace fixtures
