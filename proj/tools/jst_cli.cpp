// jst: command-line driver for corpus generation, pretraining and evaluation.
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "jst/checkpoint.hpp"
#include "jst/experiment.hpp"
#include "jst/grad_check.hpp"
#include "jst/rng.hpp"

#ifndef JST_VERSION
#define JST_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace jst;

namespace {

// JST_LOG=quiet|info|debug (default info).
int log_level() {
  static const int level = [] {
    const char* v = std::getenv("JST_LOG");
    const std::string s = v ? v : "info";
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;
  }();
  return level;
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[jst] " << msg << "\n";
}

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 1;
  std::string variant = "mslam-ctc";
  bool force = false;
};

// Guards an output directory: refuses to reuse a finished run without --force
// and holds an exclusive lock file while the command runs.
class RunDir {
 public:
  RunDir(const fs::path& dir, bool force) : dir_(dir) {
    if (fs::exists(dir / "manifest.json") && !force) {
      throw Error("'" + dir.string() + "' already holds a run; pass --force to overwrite");
    }
    fs::create_directories(dir);
    lock_ = dir / ".lock";
    std::FILE* f = std::fopen(lock_.c_str(), "wx");
    if (!f) throw Error("'" + dir.string() + "' is locked by another run (remove .lock if stale)");
    std::fclose(f);
    fs::remove(dir / "manifest.json");
  }
  ~RunDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  fs::path operator/(const std::string& name) const { return dir_ / name; }

  void finish(const std::string& command, const Config& cfg, const Common& c,
              const nlohmann::json& extra = nlohmann::json::object()) const {
    nlohmann::json m;
    m["command"] = command;
    m["version"] = JST_VERSION;
    m["seed"] = c.seed;
    m["variant"] = c.variant;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg.hash()));
    m["config_hash"] = hash;
    m["config"] = cfg.values();
    m["finished_unix"] = static_cast<std::int64_t>(std::time(nullptr));
    m["result"] = extra;
    std::ofstream(dir_ / "manifest.json") << m.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  fs::path lock_;
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << s;
}

ExperimentConfig load_experiment(const Common& c, Config& cfg) {
  cfg = Config::load(c.config);
  auto e = experiment_config_from(cfg);
  e.seeds = {c.seed};
  return e;
}

// Manifests named by data.speech / data.text / data.paired replace the
// synthetic corpus; data.vocab replaces the built vocabulary.
CorpusBundle corpus_for(const ExperimentConfig& e, const Config& cfg, std::uint64_t seed) {
  if (!cfg.has("data.speech") && !cfg.has("data.text") && !cfg.has("data.paired")) {
    auto b = build_corpus(e, seed);
    if (cfg.has("data.vocab")) b.vocab = CharVocab::load(cfg.get("data.vocab", ""));
    return b;
  }
  CorpusBundle b;
  if (cfg.has("data.speech")) b.data.speech = load_speech_manifest(cfg.get("data.speech", ""));
  if (cfg.has("data.text")) b.data.text = load_text_manifest(cfg.get("data.text", ""));
  if (cfg.has("data.paired")) b.data.paired = load_paired_manifest(cfg.get("data.paired", ""));
  b.probe_eval = cfg.has("data.probe_eval") ? load_paired_manifest(cfg.get("data.probe_eval", "")) : b.data.paired;
  if (cfg.has("data.vocab")) {
    b.vocab = CharVocab::load(cfg.get("data.vocab", ""));
  } else {
    std::vector<std::pair<std::string, std::string>> texts;
    for (const auto& t : b.data.text) texts.emplace_back(t.language, t.text);
    for (const auto& p : b.data.paired) texts.emplace_back(p.language, p.transcript);
    b.vocab = CharVocab::build(texts, e.model.vocab_size);
  }
  return b;
}

std::unique_ptr<Model> load_pretrained(const fs::path& run, const ExperimentConfig& e) {
  ModelConfig mc = e.model;
  mc.frame_dim = e.synth.frame_dim;
  auto m = std::make_unique<Model>(mc, 0);
  m->params().load_entries(read_checkpoint(run / "model.ckpt"), "param/");
  return m;
}

int cmd_build_vocab(const Common& c) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  const auto corpus = corpus_for(e, cfg, c.seed);
  RunDir dir(c.out, c.force);
  corpus.vocab.save(dir / "vocab.tsv");
  dir.finish("build-vocab", cfg, c, {{"used", corpus.vocab.used()}, {"size", corpus.vocab.size()}});
  info("vocabulary: " + std::to_string(corpus.vocab.used()) + " of " + std::to_string(corpus.vocab.size()) + " ids used");
  return 0;
}

int cmd_gen_synth(const Common& c) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  RunDir dir(c.out, c.force);
  const auto paths = gen_synth(e.synth, e.sentences, c.seed, fs::path(c.out));
  dir.finish("gen-synth", cfg, c,
             {{"speech", paths.speech.string()}, {"text", paths.text.string()}, {"paired", paths.paired.string()}});
  info("wrote manifests under " + c.out);
  return 0;
}

int cmd_pretrain(const Common& c) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  const auto variant = parse_variant(c.variant);
  const auto corpus = corpus_for(e, cfg, c.seed);
  RunDir dir(c.out, c.force);
  std::ofstream log(dir / "train_log.tsv");
  log << log_header() << "\n";
  std::vector<StepLosses> hist;
  info("pretraining " + c.variant + " for " + std::to_string(e.pretrain_steps) + " steps");
  ModelConfig mc = e.model;
  mc.frame_dim = e.synth.frame_dim;
  Model model(mc, derive_seed(c.seed, {0x6d6f64ULL}));
  TrainConfig tc = e.train;
  tc.variant = variant;
  tc.seed = c.seed;
  Trainer trainer(model, corpus.vocab, corpus.data, tc);
  for (std::size_t s = 0; s < e.pretrain_steps; ++s) {
    const auto st = trainer.step();
    log << format_log_line(st) << "\n";
    if (log_level() >= 2 || (log_level() >= 1 && st.step % 100 == 0)) info(format_log_line(st));
  }
  trainer.save(dir / "model.ckpt");
  corpus.vocab.save(dir / "vocab.tsv");
  write_text(dir / "config.conf", cfg.canonical());
  dir.finish("pretrain", cfg, c, {{"steps", trainer.step_count()}, {"final_loss", trainer.history().back().total}});
  return 0;
}

int cmd_finetune(const Common& c, const std::string& from, const std::string& modality) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  const auto model = load_pretrained(from, e);
  const auto vocab = CharVocab::load(fs::path(from) / "vocab.tsv");
  const auto task = make_keyword_task(e.synth, e.task, derive_seed(c.seed, {0x7461736bULL}));
  RunDir dir(c.out, c.force);
  ClassifierConfig cc = e.classifier;
  cc.seed = derive_seed(c.seed, {0x66696e65ULL});
  const Modality m = modality == "text" ? Modality::kText : Modality::kSpeech;
  const auto r = finetune_classifier(*model, vocab, task, m, cc);
  const Modality other = m == Modality::kText ? Modality::kSpeech : Modality::kText;
  const double cross = classifier_accuracy(*r.encoder, *r.head, vocab, task.test, other);
  std::ostringstream os;
  os << "grid_point\tdev_accuracy\n";
  for (const auto& [pt, acc] : r.dev_scores) os << pt.str() << "\t" << acc << "\n";
  write_text(dir / "grid.tsv", os.str());
  dir.finish("finetune", cfg, c,
             {{"modality", modality}, {"best", r.best.str()}, {"dev_accuracy", r.dev_accuracy},
              {"test_accuracy", r.test_accuracy}, {"cross_modal_test_accuracy", cross}});
  info("test accuracy " + std::to_string(r.test_accuracy) + ", cross-modal " + std::to_string(cross));
  return 0;
}

int cmd_probe(const Common& c, const std::string& from) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  const auto model = load_pretrained(from, e);
  auto corpus = corpus_for(e, cfg, c.seed);
  corpus.vocab = CharVocab::load(fs::path(from) / "vocab.tsv");
  RunDir dir(c.out, c.force);
  ProbeConfig pc = e.probe;
  pc.seed = c.seed;
  const auto probe = fit_ctc_probe(*model, corpus.vocab, corpus.data.paired, pc);
  ProbeResult r;
  run_probe(probe, *model, corpus.vocab, corpus.probe_eval, Modality::kSpeech, r);
  run_probe(probe, *model, corpus.vocab, corpus.probe_eval, Modality::kText, r);
  write_text(dir / "probe.tsv", r.report());
  dir.finish("probe", cfg, c, {{"asr_cer", r.mean_asr()}, {"cae_cer", r.mean_cae()}});
  info("ASR CER " + std::to_string(r.mean_asr()) + ", CAE CER " + std::to_string(r.mean_cae()));
  return 0;
}

int cmd_eval_matrix(const Common& c, bool all_seeds) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  if (all_seeds) e.seeds = experiment_config_from(cfg).seeds;
  RunDir dir(c.out, c.force);
  std::ostream* log = log_level() >= 1 ? &std::cerr : nullptr;
  const auto rep = run_experiment(e, log);
  write_text(dir / "matrix.tsv", rep.tsv());
  dir.finish("eval-matrix", cfg, c, {{"seconds", rep.seconds}});
  std::cout << rep.tsv();
  return 0;
}

int cmd_grad_check(const Common& c, std::size_t n_params) {
  Config cfg;
  auto e = load_experiment(c, cfg);
  const auto corpus = corpus_for(e, cfg, c.seed);
  ModelConfig mc = e.model;
  mc.frame_dim = e.synth.frame_dim;
  Model model(mc, c.seed);
  TrainConfig tc = e.train;
  tc.variant = parse_variant(c.variant);
  tc.seed = c.seed;
  tc.quantizer_mode = QuantizerMode::kSoft;
  Trainer trainer(model, corpus.vocab, corpus.data, tc);
  const auto batch = trainer.next_batch();
  std::mt19937_64 rng(c.seed);
  const auto tensors = model.params().tensors();
  std::vector<Coordinate> coords;
  for (std::size_t i = 0; i < n_params; ++i) {
    const auto& t = tensors[uniform_index(rng, tensors.size())];
    coords.push_back({t, uniform_index(rng, t.numel())});
  }
  const auto rep = grad_check_coordinates([&] { return trainer.build_step(batch, 1).total; }, coords);
  std::cout << "max_rel_error\t" << rep.max_rel_error << "\n";
  return rep.max_rel_error < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jst: joint speech-text pretraining at desk scale"};
  app.set_version_flag("--version", JST_VERSION);
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", c.config, "config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "run seed");
    if (!needs_out) return;
    sub->add_option("--out", c.out, "output directory")->required();
    sub->add_flag("--force", c.force, "overwrite an existing run directory");
  };
  auto* vocab = app.add_subcommand("build-vocab", "build the character vocabulary");
  add_common(vocab, true);
  auto* synth = app.add_subcommand("gen-synth", "write a synthetic corpus and manifests");
  add_common(synth, true);
  auto* pre = app.add_subcommand("pretrain", "pre-train one variant");
  add_common(pre, true);
  pre->add_option("--variant", c.variant, "speech-only | mslam-tlm | mslam-ctc | mslam-ctc-no-text");
  std::string from, modality = "speech";
  auto* ft = app.add_subcommand("finetune", "fine-tune a keyword classifier on one modality");
  add_common(ft, true);
  ft->add_option("--from", from, "pretrain output directory")->required()->check(CLI::ExistingDirectory);
  ft->add_option("--modality", modality, "speech | text")->check(CLI::IsMember({"speech", "text"}));
  auto* probe = app.add_subcommand("probe", "fit a CTC probe on a frozen encoder");
  add_common(probe, true);
  probe->add_option("--from", from, "pretrain output directory")->required()->check(CLI::ExistingDirectory);
  bool all_seeds = false;
  auto* matrix = app.add_subcommand("eval-matrix", "pre-train every variant and report zero-shot transfer");
  add_common(matrix, true);
  matrix->add_flag("--all-seeds", all_seeds, "use experiment.seeds instead of --seed");
  std::size_t n_params = 50;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of one pretraining step");
  add_common(gc, false);
  gc->add_option("--variant", c.variant, "variant whose step is checked");
  gc->add_option("--params", n_params, "parameter coordinates to check");
  CLI11_PARSE(app, argc, argv);

  try {
    if (*vocab) return cmd_build_vocab(c);
    if (*synth) return cmd_gen_synth(c);
    if (*pre) return cmd_pretrain(c);
    if (*ft) return cmd_finetune(c, from, modality);
    if (*probe) return cmd_probe(c, from);
    if (*matrix) return cmd_eval_matrix(c, all_seeds);
    if (*gc) return cmd_grad_check(c, n_params);
  } catch (const std::exception& e) {
    std::cerr << "jst: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
