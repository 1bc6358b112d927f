// Acceptance gate: one [PASS]/[FAIL] line per criterion.
//   acceptance [--only 1,3,9] [--config desk.conf]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "jst/experiment.hpp"
#include "jst/grad_check.hpp"
#include "jst/losses.hpp"
#include "jst/rng.hpp"
#include "jst/sampler.hpp"

using namespace jst;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<double> random_log_probs(std::mt19937_64& rng, std::size_t T, std::size_t V) {
  std::vector<double> lp(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += (lp[t * V + v] = std::exp(2.0 * standard_normal(rng)));
    for (std::size_t v = 0; v < V; ++v) lp[t * V + v] = std::log(lp[t * V + v] / z);
  }
  return lp;
}

// Every labeling over non-blank symbols up to length `max_len`.
void labelings(std::size_t V, int blank, std::size_t max_len, std::vector<int>& cur,
               const std::function<void(const std::vector<int>&)>& visit) {
  visit(cur);
  if (cur.size() == max_len) return;
  for (int v = 0; v < static_cast<int>(V); ++v) {
    if (v == blank) continue;
    cur.push_back(v);
    labelings(V, blank, max_len, cur, visit);
    cur.pop_back();
  }
}

Outcome ctc_oracle() {
  std::mt19937_64 rng(20240501);
  double worst = 0;
  std::size_t feasible = 0;
  const int n = 600;
  for (int i = 0; i < n; ++i) {
    const std::size_t T = 1 + uniform_index(rng, 6), V = 2 + uniform_index(rng, 4);
    const int blank = static_cast<int>(uniform_index(rng, V));
    std::vector<int> target(uniform_index(rng, 4));
    for (auto& c : target) {
      do c = static_cast<int>(uniform_index(rng, V)); while (c == blank);
    }
    const auto lp = random_log_probs(rng, T, V);
    const auto r = ctc_loss(Tensor::from({T, V}, lp), target, blank);
    const double oracle = ctc_brute_force(lp, T, V, target, blank);
    if (!r.feasible) {
      if (std::isfinite(oracle)) worst = INFINITY;
      continue;
    }
    ++feasible;
    worst = std::max(worst, std::abs(r.loss.item() - oracle));
  }
  return {worst < 1e-9 && feasible >= 500,
          "max |ctc - brute force| = " + fmt("%.3g", worst) + " over " + std::to_string(feasible) +
              " feasible of " + std::to_string(n) + " instances"};
}

Outcome ctc_conservation() {
  std::mt19937_64 rng(77);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t T = 1 + uniform_index(rng, 5), V = 2 + uniform_index(rng, 3);
    const int blank = static_cast<int>(uniform_index(rng, V));
    const auto lp = random_log_probs(rng, T, V);
    const auto probs = Tensor::from({T, V}, lp);
    double total = 0;
    std::vector<int> cur;
    labelings(V, blank, T, cur, [&](const std::vector<int>& y) {
      const auto r = ctc_loss(probs, y, blank);
      if (r.feasible) total += std::exp(-r.loss.item());
    });
    worst = std::max(worst, std::abs(total - 1.0));
  }
  return {worst < 1e-9, "max |sum over labelings - 1| = " + fmt("%.3g", worst) + " over 200 tables"};
}

Tensor randn(std::mt19937_64& rng, Shape s, bool grad = true) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = standard_normal(rng);
  return Tensor::from(std::move(s), std::move(v), grad);
}

Outcome gradient_suite(const ExperimentConfig& e) {
  std::ostringstream detail;
  double overall = 0;
  auto record = [&](const std::string& name, double err) {
    overall = std::max(overall, err);
    detail << name << " " << fmt("%.2g", err) << ", ";
  };
  std::mt19937_64 rng(5);
  {
    double w = 0;
    for (int i = 0; i < 10; ++i) {
      auto logits = randn(rng, {6, 4});
      std::vector<int> target{1, 2, 1};
      w = std::max(w, grad_check([&] { return ctc_loss(log_softmax(logits), target, 0).loss; }, logits));
    }
    record("ctc", w);
  }
  {
    double w = 0;
    for (int i = 0; i < 10; ++i) {
      auto ctx = randn(rng, {6, 4}), tgt = randn(rng, {6, 4}), logits = randn(rng, {6, 5});
      const auto dis = sample_distractors(6, 3, rng);
      auto f = [&] { return add(contrastive_loss(ctx, tgt, dis, 0.1).loss, scale(diversity_loss(softmax(logits)), 0.1)); };
      for (auto* x : {&ctx, &tgt, &logits}) w = std::max(w, grad_check(f, *x));
    }
    record("contrastive", w);
  }
  {
    double w = 0;
    for (int i = 0; i < 10; ++i) {
      auto l = randn(rng, {4, 7});
      std::vector<int> t{0, 3, 6, 2};
      w = std::max(w, grad_check([&] { return mlm_loss(log_softmax(l), t); }, l));
    }
    record("mlm", w);
  }

  const auto corpus = build_corpus(e, 1);
  ModelConfig mc = e.model;
  mc.frame_dim = e.synth.frame_dim;
  Model model(mc, 3);
  auto sample_coords = [&](std::size_t n) {
    const auto tensors = model.params().tensors();
    std::vector<Coordinate> coords;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = tensors[uniform_index(rng, tensors.size())];
      coords.push_back({t, uniform_index(rng, t.numel())});
    }
    return coords;
  };
  {
    const auto& p = corpus.data.paired;
    PairedTargets tg;
    std::vector<const FrameSeq*> frames;
    std::vector<MaskPlan> sm;
    std::size_t masked = 0;
    for (std::size_t i = 0; i < 2; ++i) {
      frames.push_back(&p[i].frames);
      tg.transcripts.push_back(corpus.vocab.encode(p[i].transcript));
      MaskPlan tmask, smask;
      tmask.positions = {0, 2};
      smask.positions = {1};
      masked += 1;
      tg.text_masks.push_back(tmask);
      sm.push_back(smask);
    }
    tg.speech_masks = sm;
    for (std::size_t i = 0; i < masked; ++i) tg.speech_codes.push_back(static_cast<int>(i) + 1);
    auto f = [&] {
      auto out = model.encode_paired(frames, tg.transcripts, tg.speech_masks, tg.text_masks);
      auto pl = paired_loss(model, out, tg);
      return add(pl.tlm(), scale(pl.ctc, 0.03));
    };
    record("paired", grad_check_coordinates(f, sample_coords(40)).max_rel_error);
  }
  {
    Seq2SeqConfig sc;
    sc.layers = 2;
    sc.dim = 16;
    sc.heads = 2;
    sc.ff_dim = 32;
    Seq2SeqHead head(sc, mc.model_dim, mc.vocab_size, 4);
    const auto& p = corpus.data.paired;
    std::vector<const FrameSeq*> frames{&p[0].frames, &p[1].frames};
    std::vector<std::vector<int>> targets{corpus.vocab.encode(p[2].transcript), corpus.vocab.encode(p[3].transcript)};
    auto f = [&] {
      std::mt19937_64 r(1);
      return head.loss(model.encode_speech(frames, {}), targets, 0.0, r);
    };
    auto coords = sample_coords(10);
    const auto ht = head.params().tensors();
    for (int i = 0; i < 30; ++i) {
      const auto& t = ht[uniform_index(rng, ht.size())];
      coords.push_back({t, uniform_index(rng, t.numel())});
    }
    record("seq2seq", grad_check_coordinates(f, coords).max_rel_error);
  }
  {
    TrainConfig tc = e.train;
    tc.quantizer_mode = QuantizerMode::kSoft;
    tc.variant = Variant::kMslamCtc;
    Trainer trainer(model, corpus.vocab, corpus.data, tc);
    const auto batch = trainer.next_batch();
    auto f = [&] { return trainer.build_step(batch, 1).total; };
    record("desk step (50 params)", grad_check_coordinates(f, sample_coords(50)).max_rel_error);
  }
  auto s = detail.str();
  s.resize(s.size() - 2);
  return {overall < 1e-4, "max rel err: " + s};
}

Outcome config_fidelity() {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  expect(lr_schedule(40000, 40000, 6e-4) == 6e-4, "lr(40000)");
  expect(lr_schedule(160000, 40000, 6e-4) == 3e-4, "lr(160000)");
  const TrainConfig def;
  expect(def.warmup_steps == 40000 && def.peak_lr == 6e-4, "default schedule");
  const LossWeights w;
  expect(w.speech == 1.0 && w.text == 0.3 && w.paired_ctc == 0.03, "loss weights");
  expect(def.batch.speech == 2048 && def.batch.text == 8192 && def.batch.paired == 256, "batch composition");
  try {
    def.validate();
  } catch (const Error&) {
    bad.push_back("default config rejected");
  }
  const auto p6 = model_preset("paper-600m"), p2 = model_preset("paper-2b");
  expect(p6.model_dim == 1024 && p6.n_layers_contrastive + p6.n_layers_mlm == 24, "paper-600m shape");
  expect(p2.model_dim == 1408 && p2.n_layers_contrastive == 8 && p2.n_layers_mlm == 32, "paper-2b shape");
  expect(train_preset("paper-2b").peak_lr == 3.6e-4, "paper-2b lr");
  const auto n6 = parameter_count(p6), n2 = parameter_count(p2);
  std::ostringstream os;
  os << "lr(40000)=" << lr_schedule(40000, 40000, 6e-4) << " lr(160000)=" << lr_schedule(160000, 40000, 6e-4)
     << "; paper-600m " << fmt("%.0fM", n6 / 1e6) << " params, paper-2b " << fmt("%.0fM", n2 / 1e6) << " params";
  for (const auto& b : bad) os << "; wrong: " << b;
  return {bad.empty() && n6 > 0 && n2 > n6, os.str()};
}

Outcome determinism(const ExperimentConfig& e) {
  const auto corpus = build_corpus(e, 11);
  ModelConfig mc = e.model;
  mc.frame_dim = e.synth.frame_dim;
  TrainConfig tc = e.train;
  tc.seed = 11;
  auto trace = [&](Model& m, std::size_t steps) {
    Trainer t(m, corpus.vocab, corpus.data, tc);
    t.run(steps);
    return t.history();
  };
  Model a(mc, 1), b(mc, 1);
  const auto ta = trace(a, 50), tb = trace(b, 50);
  const bool same50 = ta == tb && a.params().hash() == b.params().hash();

  const auto dir = std::filesystem::temp_directory_path() / "jst_acceptance_resume";
  std::filesystem::create_directories(dir);
  Model straight(mc, 1), first(mc, 1), resumed(mc, 99);
  Trainer s(straight, corpus.vocab, corpus.data, tc);
  s.run(20);
  Trainer f(first, corpus.vocab, corpus.data, tc);
  f.run(10);
  f.save(dir / "step10.ckpt");
  Trainer r(resumed, corpus.vocab, corpus.data, tc);
  r.load(dir / "step10.ckpt");
  r.run(10);
  std::filesystem::remove_all(dir);
  const bool resume = resumed.params().hash() == straight.params().hash() &&
                      r.history().back() == s.history().back() &&
                      r.sampler_positions() == s.sampler_positions();
  return {same50 && resume, std::string("50-step traces ") + (same50 ? "identical" : "DIFFER") +
                                "; resume at 10 vs straight 20 " + (resume ? "identical" : "DIFFERS")};
}

Outcome sampler_stats() {
  const std::map<std::string, std::size_t> counts{{"en", 5000}, {"fr", 800}, {"sw", 60}, {"yo", 7}};
  std::map<std::string, std::vector<TextSentence>> recs;
  for (const auto& [l, n] : counts)
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 50); ++i) recs[l].push_back({l + std::to_string(i), l, "x"});
  double worst = 0;
  std::ostringstream os;
  for (double T : {1.0, 3.0, 100.0}) {
    const auto w = language_weights(counts, T);
    LanguageStream<TextSentence> s(recs, w, derive_seed(1, {static_cast<std::uint64_t>(T)}));
    std::map<std::string, double> freq;
    const int n = 30000;
    for (int i = 0; i < n; ++i) freq[s.next().language] += 1.0 / n;
    double linf = 0;
    for (const auto& [l, p] : w) linf = std::max(linf, std::abs(freq[l] - p));
    worst = std::max(worst, linf);
    os << "T=" << T << " Linf " << fmt("%.4f", linf) << "; ";
  }
  std::map<std::string, std::size_t> scaled;
  for (const auto& [l, n] : counts) scaled[l] = n * 1000;
  double scale_err = 0;
  for (double T : {1.0, 3.0, 100.0}) {
    const auto a = language_weights(counts, T), b = language_weights(scaled, T);
    for (const auto& [l, p] : a) scale_err = std::max(scale_err, std::abs(p - b.at(l)));
  }
  os << "scale invariance " << fmt("%.2g", scale_err);
  return {worst <= 0.01 && scale_err <= 1e-12, os.str()};
}

struct ExperimentChecks {
  Outcome zero_shot, no_text, probe, asymmetry;
};

ExperimentChecks experiment_criteria(const ExperimentConfig& e) {
  const auto rep = run_experiment(e, &std::cerr);
  std::cout << rep.tsv() << std::flush;
  auto get = [&](Variant v) -> const VariantSummary* {
    auto it = rep.summary.find(v);
    return it == rep.summary.end() ? nullptr : &it->second;
  };
  const auto* ctc = get(Variant::kMslamCtc);
  const auto* tlm = get(Variant::kMslamTlm);
  const auto* so = get(Variant::kSpeechOnly);
  const auto* nt = get(Variant::kMslamCtcNoText);
  ExperimentChecks c;
  const auto seeds = " (" + std::to_string(e.seeds.size()) + " seeds, " + fmt("%.0f s", rep.seconds) + ")";
  if (ctc && tlm && so) {
    const double chance = ctc->mean.chance;
    c.zero_shot.pass = ctc->mean.st >= 2 * chance && so->mean.st <= 1.25 * chance && ctc->mean.st > tlm->mean.st;
    c.zero_shot.detail = "S->T mslam-ctc " + fmt("%.3f", ctc->mean.st) + " (>= " + fmt("%.3f", 2 * chance) +
                         "), speech-only " + fmt("%.3f", so->mean.st) + " (<= " + fmt("%.3f", 1.25 * chance) +
                         "), mslam-tlm " + fmt("%.3f", tlm->mean.st) + seeds;
  } else {
    c.zero_shot.detail = "variants missing from the experiment";
  }
  if (ctc && so && nt) {
    c.no_text.pass = so->mean.st <= nt->mean.st && nt->mean.st <= ctc->mean.st;
    c.no_text.detail = "S->T speech-only " + fmt("%.3f", so->mean.st) + " <= no-text " + fmt("%.3f", nt->mean.st) +
                       " <= mslam-ctc " + fmt("%.3f", ctc->mean.st);
  } else {
    c.no_text.detail = "variants missing from the experiment";
  }
  bool hashes = true;
  for (const auto& r : rep.runs) hashes = hashes && r.probe_hash_unchanged;
  if (ctc && tlm && ctc->probed && tlm->probed) {
    c.probe.pass = ctc->asr_cer < 0.10 && tlm->cae_cer - ctc->cae_cer >= 0.2 && hashes &&
                   e.synth.noise_std <= 0.1;
    c.probe.detail = "mslam-ctc ASR CER " + fmt("%.3f", ctc->asr_cer) + ", CAE CER mslam-ctc " +
                     fmt("%.3f", ctc->cae_cer) + " vs mslam-tlm " + fmt("%.3f", tlm->cae_cer) +
                     ", encoder hashes " + (hashes ? "unchanged" : "CHANGED");
  } else {
    c.probe.detail = "probe variants missing from the experiment";
  }
  c.asymmetry.pass = !rep.summary.empty();
  std::ostringstream os;
  os << "T->S";
  for (const auto& [v, s] : rep.summary) {
    c.asymmetry.pass = c.asymmetry.pass && s.mean.ts <= 1.25 * s.mean.chance;
    os << " " << variant_name(v) << " " << fmt("%.3f", s.mean.ts);
  }
  if (!rep.summary.empty()) os << " (<= " << fmt("%.3f", 1.25 * rep.summary.begin()->second.mean.chance) << ")";
  c.asymmetry.detail = os.str();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::string only, config;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--config", config, "experiment config file")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (only.empty()) {
    for (int i = 1; i <= 10; ++i) selected.insert(i);
  } else {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  }
  ExperimentConfig e;
  try {
    e = config.empty() ? desk_experiment() : experiment_config_from(Config::load(config));
  } catch (const Error& err) {
    std::cerr << "acceptance: " << err.what() << "\n";
    return 2;
  }

  int failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn, double budget_s) {
    if (!selected.count(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("threw: ") + ex.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget_s > 0 && dt > budget_s) {
      o.pass = false;
      o.detail += "; over time budget " + fmt("%.0f s", budget_s);
    }
    failed += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << " " << name << ": " << o.detail << " ["
              << fmt("%.1f s", dt) << "]" << std::endl;
  };

  report(1, "CTC oracle equivalence", ctc_oracle, 30);
  report(2, "CTC probability conservation", ctc_conservation, 10);
  report(3, "gradient suite", [&] { return gradient_suite(e); }, 300);
  report(4, "configuration fidelity", config_fidelity, 1);

  if (selected.count(5) || selected.count(6) || selected.count(7) || selected.count(8)) {
    ExperimentChecks checks;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      checks = experiment_criteria(e);
    } catch (const std::exception& ex) {
      checks.zero_shot = checks.no_text = checks.probe = checks.asymmetry = {false, std::string("threw: ") + ex.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dt > 3600) checks.zero_shot.detail += "; over the 60 min target";
    report(5, "zero-shot speech->text transfer", [&] { return checks.zero_shot; }, 0);
    report(6, "no-unlabeled-text ablation ordering", [&] { return checks.no_text; }, 0);
    report(7, "CTC probe ASR/CAE contrast", [&] { return checks.probe; }, 0);
    report(8, "text->speech asymmetry", [&] { return checks.asymmetry; }, 0);
  }
  report(9, "determinism and resume", [&] { return determinism(e); }, 0);
  report(10, "sampler statistics", sampler_stats, 0);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all selected criteria passed") << std::endl;
  return failed ? 1 : 0;
}
