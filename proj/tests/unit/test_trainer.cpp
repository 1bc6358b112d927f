#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "jst/config.hpp"
#include "jst/experiment.hpp"
#include "jst/trainer.hpp"

using namespace jst;

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(40000, 40000, 6e-4) == 6e-4);
  CHECK(lr_schedule(160000, 40000, 6e-4) == 3e-4);
  CHECK(lr_schedule(20000, 40000, 6e-4) == doctest::Approx(3e-4));
  CHECK(lr_schedule(1, 40000, 6e-4) == doctest::Approx(6e-4 / 40000));
  // Peak sits exactly at the end of warmup.
  CHECK(lr_schedule(39999, 40000, 6e-4) < 6e-4);
  CHECK(lr_schedule(40001, 40000, 6e-4) < 6e-4);
  CHECK_THROWS_AS(lr_schedule(0, 40000, 6e-4), Error);
}

TEST_CASE("adam hand-computed steps") {
  auto x = Tensor::from({1}, {1.0}, true);
  std::vector<Tensor> params{x};
  AdamState st;
  // Bias correction makes the first two steps exactly lr * sign(g) up to eps.
  adam_step(params, {{0.5}}, st, 0.1, 0.9, 0.98, 1e-9);
  CHECK(x.at(0) == doctest::Approx(0.9).epsilon(1e-8));
  adam_step(params, {{0.5}}, st, 0.1, 0.9, 0.98, 1e-9);
  CHECK(x.at(0) == doctest::Approx(0.8).epsilon(1e-8));
  // A sign flip: m = 0.9*0.095 - 0.05, v = 0.98*0.0099... computed directly.
  double m = 0.095 * 0.9 - 0.05, v = (0.98 * 0.005 + 0.005) * 0.98 + 0.02 * 0.25;
  const double expect = x.at(0) - 0.1 * (m / (1 - 0.729)) / (std::sqrt(v / (1 - std::pow(0.98, 3))) + 1e-9);
  adam_step(params, {{-0.5}}, st, 0.1, 0.9, 0.98, 1e-9);
  CHECK(x.at(0) == doctest::Approx(expect).epsilon(1e-10));
  CHECK(st.t == 3);
}

TEST_CASE("global norm clipping") {
  std::vector<std::vector<double>> g{{3.0}, {4.0}};
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));
  std::vector<std::vector<double>> small{{0.3}};
  clip_global_norm(small, 1.0);
  CHECK(small[0][0] == 0.3);
}

TEST_CASE("variants and presets") {
  for (auto v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK_THROWS_AS(parse_variant("mslam"), Error);
  TrainConfig c;
  c.variant = Variant::kSpeechOnly;
  CHECK(c.effective_batch().text == 0);
  CHECK(c.effective_batch().paired == 0);
  CHECK(c.effective_ctc_weight() == 0.0);
  c.variant = Variant::kMslamTlm;
  CHECK(c.effective_ctc_weight() == 0.0);
  c.variant = Variant::kMslamCtcNoText;
  CHECK(c.effective_batch().text == 0);
  CHECK(c.effective_batch().paired == kPaperBatchSizes.paired);
  CHECK(c.effective_ctc_weight() == 0.03);
  CHECK(train_preset("paper-2b").peak_lr == 3.6e-4);
  CHECK(train_preset("paper-600m").peak_lr == 6e-4);
  CHECK(train_preset("paper-600m").warmup_steps == 40000);
}

TEST_CASE("trainer runs, logs and is deterministic") {
  auto t = fixtures::tiny_setup();
  Model m1(t.model, 5), m2(t.model, 5);
  Trainer a(m1, t.vocab, t.data, t.train), b(m2, t.vocab, t.data, t.train);
  std::ostringstream log;
  a.run(6, &log);
  b.run(6);
  CHECK(a.history() == b.history());
  CHECK(m1.params().hash() == m2.params().hash());
  const auto text = log.str();
  CHECK(text.rfind("1\t", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 6);
  for (const auto& s : a.history()) {
    CHECK(std::isfinite(s.total));
    CHECK(s.ctc > 0);
    CHECK(s.tlm > 0);
  }
  CHECK(a.sampler_positions() == std::vector<std::uint64_t>{18, 24, 12});

  // A different seed changes the trajectory.
  auto c2 = t.train;
  c2.seed = 2;
  Model m3(t.model, 5);
  Trainer c(m3, t.vocab, t.data, c2);
  c.run(6);
  CHECK(c.history() != a.history());
}

TEST_CASE("build_step is pure") {
  auto t = fixtures::tiny_setup();
  Model m(t.model, 5);
  Trainer tr(m, t.vocab, t.data, t.train);
  const auto batch = tr.next_batch();
  const auto before = m.params().hash();
  const auto g1 = tr.build_step(batch, 3);
  const auto g2 = tr.build_step(batch, 3);
  CHECK(g1.total.item() == g2.total.item());
  CHECK(g1.values == g2.values);
  CHECK(m.params().hash() == before);
}

TEST_CASE("resume reproduces an uninterrupted run") {
  auto t = fixtures::tiny_setup();
  const auto dir = std::filesystem::temp_directory_path() / "jst_resume_test";
  std::filesystem::create_directories(dir);
  Model full(t.model, 9);
  Trainer a(full, t.vocab, t.data, t.train);
  a.run(3);
  a.save(dir / "ck.bin");
  a.run(3);

  Model resumed(t.model, 123);
  Trainer b(resumed, t.vocab, t.data, t.train);
  b.load(dir / "ck.bin");
  CHECK(b.step_count() == 3);
  b.run(3);
  CHECK(resumed.params().hash() == full.params().hash());
  CHECK(b.history().back() == a.history().back());

  // Checkpoints refuse a different variant.
  auto other = t.train;
  other.variant = Variant::kMslamTlm;
  Model m3(t.model, 9);
  Trainer c(m3, t.vocab, t.data, other);
  CHECK_THROWS_AS(c.load(dir / "ck.bin"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("speech-only never touches text-only parameters") {
  auto t = fixtures::tiny_setup();
  t.train.variant = Variant::kSpeechOnly;
  Model m(t.model, 4);
  std::vector<std::vector<double>> before;
  for (const auto& name : m.text_only_parameters()) {
    const auto d = m.params().get(name).data();
    before.emplace_back(d.begin(), d.end());
  }
  Trainer tr(m, t.vocab, t.data, t.train);
  tr.run(4);
  std::size_t i = 0;
  for (const auto& name : m.text_only_parameters()) {
    const auto d = m.params().get(name).data();
    CHECK(std::vector<double>(d.begin(), d.end()) == before[i++]);
  }
  for (const auto& s : tr.history()) {
    CHECK(s.text_mlm == 0.0);
    CHECK(s.tlm == 0.0);
    CHECK(s.ctc == 0.0);
  }
}

TEST_CASE("variant missing its data is rejected") {
  auto t = fixtures::tiny_setup();
  t.data.paired.clear();
  Model m(t.model, 4);
  CHECK_THROWS_AS(Trainer(m, t.vocab, t.data, t.train), Error);
  t.train.variant = Variant::kSpeechOnly;
  CHECK_NOTHROW(Trainer(m, t.vocab, t.data, t.train));
}

TEST_CASE("config parsing") {
  auto c = Config::parse(
      "# desk run\n"
      "model.preset = desk\n"
      "model.dim = 48   # override\n"
      "train.peak_lr = 1e-3\n"
      "train.variant = mslam-tlm\n"
      "loss.text = 0.5\n"
      "synth.languages = a, b ,c\n"
      "synth.script_map = a:latn,b:latn,c:cyrl\n"
      "synth.paired_languages = a\n"
      "typo.key = 1\n");
  auto mc = model_config_from(c);
  CHECK(mc.model_dim == 48);
  CHECK(mc.ff_dim == model_preset("desk").ff_dim);
  auto tc = train_config_from(c);
  CHECK(tc.peak_lr == 1e-3);
  CHECK(tc.variant == Variant::kMslamTlm);
  CHECK(tc.weights.text == 0.5);
  CHECK(tc.warmup_steps == 40000);
  auto sc = synth_spec_from(c);
  CHECK(sc.languages == std::vector<std::string>{"a", "b", "c"});
  CHECK(sc.script_map.at("c") == "cyrl");
  CHECK(c.unused_keys() == std::vector<std::string>{"typo.key"});

  auto reordered = Config::parse("train.peak_lr = 1e-3\nmodel.dim = 48\n");
  auto same = Config::parse("model.dim=48\n\ntrain.peak_lr =1e-3");
  CHECK(reordered.hash() == same.hash());
  CHECK_THROWS_AS(Config::parse("no equals sign\n"), Error);
  CHECK_THROWS_AS(Config::parse("a = 1\na = 2\n"), Error);
  CHECK_THROWS_AS(Config::parse("x = abc").get_double("x", 0), Error);
  CHECK_THROWS_AS(Config::parse("x = -3").get_uint("x", 0), Error);
  CHECK_THROWS_AS(Config::parse("x = maybe").get_bool("x", false), Error);
  CHECK_THROWS_AS(Config::load("/nonexistent/cfg.conf"), Error);
}

TEST_CASE("experiment config") {
  const auto d = experiment_config_from(Config::parse("model.preset = desk\n"));
  CHECK(d.train.weights.paired_ctc == 0.3);
  CHECK(d.train.total_steps == train_preset("desk").total_steps);
  CHECK_FALSE(d.classifier.train_encoder);
  CHECK(d.task.languages == d.synth.languages);

  auto e = experiment_config_from(Config::parse(
      "experiment.seeds = 4, 5\n"
      "experiment.variants = mslam-ctc, speech-only\n"
      "task.classes = 4\n"
      "finetune.lrs = 1e-2\n"
      "finetune.projections = model_dim\n"
      "finetune.train_encoder = true\n"
      "probe.init = pretrained\n"
      "loss.paired_ctc = 0.03\n"));
  CHECK(e.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK(e.variants == std::vector<Variant>{Variant::kMslamCtc, Variant::kSpeechOnly});
  CHECK(e.task.classes == 4);
  CHECK(e.classifier.grid.lrs == std::vector<double>{1e-2});
  CHECK(e.classifier.grid.projections == std::vector<bool>{true});
  CHECK(e.classifier.train_encoder);
  CHECK(e.probe.init == ProbeInit::kPretrained);
  CHECK(e.train.weights.paired_ctc == 0.03);
  CHECK_THROWS_AS(experiment_config_from(Config::parse("finetune.projections = wide\n")), Error);
  CHECK_THROWS_AS(experiment_config_from(Config::parse("experiment.variants = mslam\n")), Error);
}
