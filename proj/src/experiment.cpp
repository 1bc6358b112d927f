#include "jst/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "jst/rng.hpp"

namespace jst {

ExperimentConfig desk_experiment() {
  ExperimentConfig e;
  e.model = model_preset("desk");
  e.train = train_preset("desk");
  e.task.languages = e.synth.languages;
  e.classifier.grid.batch_sizes = {16};
  e.classifier.grid.lrs = {1e-3, 3e-3};
  e.classifier.grid.projections = {false, true};
  e.classifier.grid.epochs = {100};
  e.classifier.grid.epoch_divisor = 1;
  // 128 training examples are too few to fine-tune the encoder without
  // washing out the cross-modal alignment; only the head is trained.
  e.classifier.train_encoder = false;
  return e;
}

ExperimentConfig experiment_config_from(const Config& c) {
  ExperimentConfig e = desk_experiment();
  Config with_defaults = c;
  if (!c.has("train.preset")) with_defaults.set("train.preset", "desk");
  e.model = model_config_from(with_defaults);
  e.train = train_config_from(with_defaults);
  e.synth = synth_spec_from(with_defaults);
  e.sentences = c.get_uint("experiment.sentences", e.sentences);
  e.probe_eval_per_language = c.get_uint("experiment.probe_eval", e.probe_eval_per_language);
  e.pretrain_steps = c.get_uint("experiment.steps", e.pretrain_steps);
  if (c.has("experiment.seeds")) {
    e.seeds.clear();
    for (double s : c.get_doubles("experiment.seeds", {})) e.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (c.has("experiment.variants")) {
    e.variants.clear();
    for (const auto& v : c.get_list("experiment.variants", {})) e.variants.push_back(parse_variant(v));
  }
  if (c.has("experiment.probe_variants")) {
    e.probe_variants.clear();
    for (const auto& v : c.get_list("experiment.probe_variants", {})) e.probe_variants.push_back(parse_variant(v));
  }
  e.task.classes = c.get_uint("task.classes", e.task.classes);
  e.task.languages = c.get_list("task.languages", e.synth.languages);
  e.task.train_per_class = c.get_uint("task.train_per_class", e.task.train_per_class);
  e.task.dev_per_class = c.get_uint("task.dev_per_class", e.task.dev_per_class);
  e.task.test_per_class = c.get_uint("task.test_per_class", e.task.test_per_class);

  auto& g = e.classifier.grid;
  auto sizes = [&](const std::string& key, std::vector<std::size_t>& out) {
    if (!c.has(key)) return;
    out.clear();
    for (double v : c.get_doubles(key, {})) out.push_back(static_cast<std::size_t>(v));
  };
  sizes("finetune.batch", g.batch_sizes);
  sizes("finetune.epochs", g.epochs);
  g.lrs = c.get_doubles("finetune.lrs", g.lrs);
  if (c.has("finetune.projections")) {
    g.projections.clear();
    for (const auto& v : c.get_list("finetune.projections", {})) {
      if (v != "none" && v != "model_dim") throw Error("finetune.projections: expected none or model_dim, got '" + v + "'");
      g.projections.push_back(v == "model_dim");
    }
  }
  g.epoch_divisor = c.get_uint("finetune.epoch_divisor", g.epoch_divisor);
  e.classifier.train_encoder = c.get_bool("finetune.train_encoder", e.classifier.train_encoder);
  e.classifier.clip_norm = c.get_double("finetune.clip_norm", e.classifier.clip_norm);
  e.probe.steps = c.get_uint("probe.steps", e.probe.steps);
  e.probe.batch = c.get_uint("probe.batch", e.probe.batch);
  e.probe.lr = c.get_double("probe.lr", e.probe.lr);
  if (c.has("probe.init")) {
    const auto init = c.get("probe.init", "");
    if (init != "zero" && init != "pretrained") throw Error("probe.init: expected zero or pretrained, got '" + init + "'");
    e.probe.init = init == "zero" ? ProbeInit::kZero : ProbeInit::kPretrained;
  }
  return e;
}

CorpusBundle build_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  CorpusBundle b;
  auto corpus = generate_synth(cfg.synth, cfg.sentences, derive_seed(seed, {0x636f7270ULL}));
  b.data = {std::move(corpus.speech), std::move(corpus.text), std::move(corpus.paired)};
  std::vector<std::pair<std::string, std::string>> texts;
  for (const auto& t : b.data.text) texts.emplace_back(t.language, t.text);
  for (const auto& p : b.data.paired) texts.emplace_back(p.language, p.transcript);
  b.vocab = CharVocab::build(texts, cfg.model.vocab_size);

  SynthSpec held_out = cfg.synth;
  held_out.paired_per_language = cfg.probe_eval_per_language;
  b.probe_eval = generate_synth(held_out, 0, derive_seed(seed, {0x686f6c64ULL})).paired;
  return b;
}

std::unique_ptr<Model> pretrain(const ExperimentConfig& cfg, const CorpusBundle& corpus, Variant variant,
                                std::uint64_t seed, std::vector<StepLosses>* history, std::ostream* log) {
  ModelConfig mc = cfg.model;
  mc.frame_dim = cfg.synth.frame_dim;
  auto model = std::make_unique<Model>(mc, derive_seed(seed, {0x6d6f64ULL}));
  TrainConfig tc = cfg.train;
  tc.variant = variant;
  tc.seed = seed;
  tc.total_steps = cfg.pretrain_steps;
  Trainer trainer(*model, corpus.vocab, corpus.data, tc);
  trainer.run(cfg.pretrain_steps, log);
  if (history) *history = trainer.history();
  return model;
}

std::string ExperimentReport::tsv() const {
  std::ostringstream os;
  os << "seed\t" << TransferMatrix::tsv_header() << "\tasr_cer\tcae_cer\n";
  char buf[64];
  auto cer_cols = [&](bool probed, double asr, double cae) {
    if (!probed) return std::string("\t-\t-");
    std::snprintf(buf, sizeof buf, "\t%.4f\t%.4f", asr, cae);
    return std::string(buf);
  };
  for (const auto& r : runs) {
    os << r.seed << '\t' << r.matrix.tsv(variant_name(r.variant))
       << cer_cols(r.probed, r.probe.mean_asr(), r.probe.mean_cae()) << '\n';
  }
  for (const auto& [v, s] : summary) {
    os << "mean\t" << s.mean.tsv(variant_name(v)) << cer_cols(s.probed, s.asr_cer, s.cae_cer) << '\n';
  }
  return os.str();
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  if (cfg.seeds.empty() || cfg.variants.empty()) throw Error("experiment: need at least one seed and variant");
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  for (auto seed : cfg.seeds) {
    const auto corpus = build_corpus(cfg, seed);
    const auto task = make_keyword_task(cfg.synth, cfg.task, derive_seed(seed, {0x7461736bULL}));
    for (auto variant : cfg.variants) {
      VariantSeedResult r;
      r.variant = variant;
      r.seed = seed;
      std::vector<StepLosses> hist;
      const auto model = pretrain(cfg, corpus, variant, seed, &hist);
      r.final_loss = hist.empty() ? 0.0 : hist.back().total;
      ClassifierConfig cc = cfg.classifier;
      cc.seed = derive_seed(seed, {0x66696e65ULL});
      r.matrix = zero_shot_eval(*model, corpus.vocab, task, cc);
      if (std::find(cfg.probe_variants.begin(), cfg.probe_variants.end(), variant) != cfg.probe_variants.end()) {
        const auto before = model->params().hash();
        ProbeConfig pc = cfg.probe;
        pc.seed = seed;
        const auto probe = fit_ctc_probe(*model, corpus.vocab, corpus.data.paired, pc);
        run_probe(probe, *model, corpus.vocab, corpus.probe_eval, Modality::kSpeech, r.probe);
        run_probe(probe, *model, corpus.vocab, corpus.probe_eval, Modality::kText, r.probe);
        r.probed = true;
        r.probe_hash_unchanged = model->params().hash() == before;
      }
      if (log) {
        *log << "seed " << seed << '\t' << r.matrix.tsv(variant_name(variant));
        if (r.probed) *log << "\tasr " << r.probe.mean_asr() << "\tcae " << r.probe.mean_cae();
        *log << "\tfinal_loss " << r.final_loss << std::endl;
      }
      report.runs.push_back(std::move(r));
    }
  }
  for (auto variant : cfg.variants) {
    VariantSummary s;
    std::size_t n = 0, probed = 0;
    for (const auto& r : report.runs) {
      if (r.variant != variant) continue;
      ++n;
      s.mean.ss += r.matrix.ss;
      s.mean.st += r.matrix.st;
      s.mean.ts += r.matrix.ts;
      s.mean.tt += r.matrix.tt;
      s.mean.chance = r.matrix.chance;
      if (r.probed) {
        ++probed;
        s.asr_cer += r.probe.mean_asr();
        s.cae_cer += r.probe.mean_cae();
      }
    }
    const double k = static_cast<double>(n);
    s.mean.ss /= k;
    s.mean.st /= k;
    s.mean.ts /= k;
    s.mean.tt /= k;
    if (probed) {
      s.probed = true;
      s.asr_cer /= static_cast<double>(probed);
      s.cae_cer /= static_cast<double>(probed);
    }
    report.summary[variant] = s;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace jst
