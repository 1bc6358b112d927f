#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "jst/evalkit.hpp"
#include "jst/grad_check.hpp"
#include "jst/probe.hpp"
#include "jst/rng.hpp"

using namespace jst;

TEST_CASE("edit distance and cer") {
  CHECK(edit_distance(U"kitten", U"sitting") == 3);
  CHECK(edit_distance(U"", U"abc") == 3);
  CHECK(edit_distance(U"abc", U"abc") == 0);
  CHECK(cer("abd", "abc") == doctest::Approx(1.0 / 3));
  CHECK(cer("", "ab") == 1.0);
  CHECK(cer("xxxx", "ab") == 2.0);
  CHECK(cer("ая", "ая") == 0.0);
  CHECK_THROWS_AS(cer("a", ""), Error);

  std::mt19937_64 rng(3);
  auto word = [&] {
    std::u32string s(uniform_index(rng, 6), U'a');
    for (auto& c : s) c = U'a' + static_cast<char32_t>(uniform_index(rng, 3));
    return s;
  };
  for (int i = 0; i < 300; ++i) {
    auto a = word(), b = word(), c = word();
    CHECK(edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c));
    CHECK(edit_distance(a, b) == edit_distance(b, a));
  }
}

TEST_CASE("greedy ctc decoding") {
  // V = 3 with blank 0. Argmax path: 1 1 0 1 2 2 -> [1, 1, 2].
  const std::vector<int> path{1, 1, 0, 1, 2, 2};
  std::vector<double> lp(path.size() * 3, std::log(0.1));
  for (std::size_t t = 0; t < path.size(); ++t) lp[t * 3 + path[t]] = std::log(0.8);
  CHECK(greedy_ctc_ids(lp, 6, 3, 0) == std::vector<int>{1, 1, 2});
  // Ties go to the lowest id, so an all-equal frame reads as blank.
  std::vector<double> flat(3, std::log(1.0 / 3));
  CHECK(greedy_ctc_ids(flat, 1, 3, 0).empty());
  CHECK(greedy_ctc_ids({}, 0, 3, 0).empty());
}

TEST_CASE("ctc probe leaves the encoder frozen") {
  auto t = fixtures::tiny_setup();
  Model m(t.model, 2);
  const auto before = m.params().hash();
  ProbeConfig pc;
  pc.steps = 40;
  pc.batch = 4;
  auto probe = fit_ctc_probe(m, t.vocab, t.data.paired, pc);
  CHECK(m.params().hash() == before);
  CHECK(probe.loss_trace.size() == 40);
  CHECK(probe.loss_trace.back() < probe.loss_trace.front());

  ProbeResult r;
  run_probe(probe, m, t.vocab, t.data.paired, Modality::kSpeech, r);
  run_probe(probe, m, t.vocab, t.data.paired, Modality::kText, r);
  CHECK(r.asr_cer.size() == 2);
  CHECK(r.cae_cer.size() == 2);
  for (auto& [lang, v] : r.asr_cer) CHECK(v >= 0.0);
  CHECK(r.report().rfind("lang\tasr_cer\tcae_cer", 0) == 0);
  CHECK(!r.samples.empty());
}

TEST_CASE("keyword task construction") {
  SynthSpec synth;
  KeywordTaskSpec task;
  task.classes = 4;
  task.train_per_class = 20;
  auto d = make_keyword_task(synth, task, 11);
  CHECK(d.train.size() == 80);
  CHECK(d.dev.size() == 4 * task.dev_per_class);
  std::set<std::string> langs;
  // The characters every example of a class shares are just its marker.
  std::vector<std::set<char32_t>> common(4);
  std::vector<bool> init(4, false);
  for (const auto& ex : d.train) {
    langs.insert(ex.language);
    auto s = utf8_decode(ex.text);
    CHECK(s.size() >= synth.min_chars);
    CHECK(s.size() <= synth.max_chars);
    CHECK(ex.frames.count == s.size() * synth.frames_per_char);
    std::set<char32_t> chars(s.begin(), s.end());
    if (!init[ex.label]) {
      common[ex.label] = chars;
      init[ex.label] = true;
    } else {
      std::set<char32_t> keep;
      std::set_intersection(common[ex.label].begin(), common[ex.label].end(), chars.begin(), chars.end(),
                            std::inserter(keep, keep.begin()));
      common[ex.label] = keep;
    }
  }
  CHECK(langs.size() == 2);
  std::set<char32_t> all;
  for (const auto& c : common) {
    REQUIRE(c.size() == 1);
    all.insert(*c.begin());
  }
  CHECK(all.size() == 4);
  // Markers appear once per example and never in other classes.
  for (const auto& ex : d.train) {
    auto s = utf8_decode(ex.text);
    for (int k = 0; k < 4; ++k) {
      const auto n = std::count(s.begin(), s.end(), *common[k].begin());
      CHECK(n == (k == ex.label ? 1 : 0));
    }
  }
  auto again = make_keyword_task(synth, task, 11);
  CHECK(again.test.back().text == d.test.back().text);
  CHECK(again.test.back().frames == d.test.back().frames);
  task.classes = synth.chars_per_language;
  CHECK_THROWS_AS(make_keyword_task(synth, task, 1), Error);
}

TEST_CASE("classifier head max-pools over valid time steps") {
  std::mt19937_64 rng(4);
  for (bool project : {false, true}) {
    ClassifierHead head(6, 3, project, rng);
    std::vector<double> v(2 * 5 * 6);
    for (auto& x : v) x = standard_normal(rng);
    EncoderOutput out;
    out.batch = 2;
    out.max_len = 5;
    out.lengths = {5, 3};
    out.hidden = Tensor::from({2, 5, 6}, v);
    const auto base = head.logits(out);
    // Permute the valid steps of item 0, scramble padding of item 1.
    auto w = v;
    const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t k = 0; k < 6; ++k) w[t * 6 + k] = v[perm[t] * 6 + k];
    for (std::size_t t = 3; t < 5; ++t)
      for (std::size_t k = 0; k < 6; ++k) w[(5 + t) * 6 + k] = 100.0;
    out.hidden = Tensor::from({2, 5, 6}, w);
    const auto moved = head.logits(out);
    for (std::size_t i = 0; i < 6; ++i) CHECK(moved.at(i) == doctest::Approx(base.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("classifier grid") {
  ClassifierGrid g;
  CHECK(g.points().size() == 3 * 4 * 2 * 2);
  g.epoch_divisor = 100;
  for (const auto& p : g.points()) CHECK((p.epochs == 1 || p.epochs == 3));
  g.batch_sizes.clear();
  CHECK_THROWS_AS(g.points(), Error);
}

TEST_CASE("random labels stay near chance") {
  auto t = fixtures::tiny_setup();
  Model m(t.model, 3);
  auto d = make_random_label_task(t.synth, 4, 24, 16, 64, 5);
  ClassifierConfig cc;
  cc.grid.batch_sizes = {8};
  cc.grid.lrs = {1e-2};
  cc.grid.projections = {false};
  cc.grid.epochs = {4};
  auto r = finetune_classifier(m, t.vocab, d, Modality::kText, cc);
  CHECK(r.dev_scores.size() == 1);
  // Binomial(64, 0.25) exceeds 0.5 with probability below 1e-4.
  CHECK(r.test_accuracy < 0.5);
  CHECK_THROWS_AS(finetune_classifier(m, t.vocab, LabeledSplits{}, Modality::kText, cc), Error);
}

TEST_CASE("language id is learnable from speech") {
  auto t = fixtures::tiny_setup();
  t.synth.script_map = {{"l0", "a"}, {"l1", "b"}};
  Model m(t.model, 3);
  auto d = make_language_id_task(t.synth, 12, 12, 6);
  ClassifierConfig cc;
  cc.grid.batch_sizes = {8};
  cc.grid.lrs = {1e-2};
  cc.grid.projections = {true};
  cc.grid.epochs = {10};
  auto r = finetune_classifier(m, t.vocab, d, Modality::kSpeech, cc);
  CHECK(r.test_accuracy > 0.9);

  // Head-only training on cached encoder states.
  const auto before = m.params().hash();
  cc.train_encoder = false;
  cc.grid.epochs = {40};
  auto frozen = finetune_classifier(m, t.vocab, d, Modality::kSpeech, cc);
  CHECK(frozen.test_accuracy > 0.7);
  CHECK(m.params().hash() == before);
}

TEST_CASE("translation stand-in") {
  const std::u32string inv = U"abcdef";
  TranslationStandIn tr(inv, 3);
  const auto out = utf8_decode(tr("abcab"));
  CHECK(out.size() == 5);
  CHECK(out[0] == out[3]);  // reversal of a..b..
  CHECK(out[1] == out[4]);
  std::set<char32_t> image;
  for (auto c : inv) image.insert(utf8_decode(tr(utf8_encode(c)))[0]);
  CHECK(image == std::set<char32_t>(inv.begin(), inv.end()));
  CHECK(tr("abc") == TranslationStandIn(inv, 3)("abc"));
  CHECK(tr("xyz") == "zyx");
}

TEST_CASE("seq2seq decoder gradient and decoding") {
  auto t = fixtures::tiny_setup();
  Model m(t.model, 3);
  Seq2SeqConfig sc;
  sc.layers = 2;
  sc.dim = 8;
  sc.heads = 2;
  sc.ff_dim = 12;
  sc.max_relative = 4;
  Seq2SeqHead head(sc, t.model.model_dim, t.model.vocab_size, 1);
  const auto& p = t.data.paired;
  std::vector<const FrameSeq*> frames{&p[0].frames, &p[1].frames};
  std::vector<std::vector<int>> targets{t.vocab.encode(p[0].transcript), t.vocab.encode(p[1].transcript)};
  std::mt19937_64 rng(2);
  auto f = [&] {
    std::mt19937_64 r(1);
    return head.loss(m.encode_speech(frames, {}), targets, 0.0, r);
  };
  std::vector<Coordinate> coords;
  const auto tensors = head.params().tensors();
  for (int i = 0; i < 30; ++i) {
    const auto& x = tensors[uniform_index(rng, tensors.size())];
    coords.push_back({x, uniform_index(rng, x.numel())});
  }
  for (int i = 0; i < 10; ++i) {
    const auto x = m.params().get("input_proj.w");
    coords.push_back({x, uniform_index(rng, x.numel())});
  }
  CHECK(grad_check_coordinates(f, coords).max_rel_error < 1e-5);

  NoGradGuard ng;
  const auto out = m.encode_speech(frames, {});
  const auto hyp = head.greedy(out, 1, 7);
  CHECK(hyp.size() <= 7);
  for (int id : hyp) CHECK((id >= 0 && id < 16 && id != kEosId));
}

TEST_CASE("seq2seq fine-tuning fits a small copy task") {
  auto t = fixtures::tiny_setup();
  Model m(t.model, 3);
  std::vector<SpeechTranslationExample> st;
  std::vector<TextTranslationExample> mt;
  for (const auto& p : t.data.paired) {
    st.push_back({p.frames, p.transcript});
    mt.push_back({p.transcript, p.transcript});
  }
  Seq2SeqConfig sc;
  sc.layers = 1;
  sc.dim = 16;
  sc.heads = 2;
  sc.ff_dim = 32;
  sc.steps = 150;
  sc.batch = 8;
  sc.lr = 3e-3;
  sc.dropout_st = sc.dropout_joint = 0.0;
  auto joint = finetune_seq2seq(m, t.vocab, st, mt, st, sc);
  CHECK(joint.loss_trace.back() < 0.5 * joint.loss_trace.front());
  CHECK(joint.metrics.token_accuracy > 0.3);
  auto again = finetune_seq2seq(m, t.vocab, st, mt, {}, sc);
  CHECK(again.loss_trace == joint.loss_trace);
  CHECK_THROWS_AS(finetune_seq2seq(m, t.vocab, {}, mt, st, sc), Error);
}
