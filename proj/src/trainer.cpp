#include "jst/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "jst/checkpoint.hpp"
#include "jst/rng.hpp"

namespace jst {

Variant parse_variant(const std::string& name) {
  if (name == "mslam-ctc") return Variant::kMslamCtc;
  if (name == "mslam-tlm") return Variant::kMslamTlm;
  if (name == "speech-only") return Variant::kSpeechOnly;
  if (name == "mslam-ctc-no-text") return Variant::kMslamCtcNoText;
  throw Error("unknown variant '" + name + "' (expected mslam-ctc, mslam-tlm, speech-only, mslam-ctc-no-text)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kMslamCtc: return "mslam-ctc";
    case Variant::kMslamTlm: return "mslam-tlm";
    case Variant::kSpeechOnly: return "speech-only";
    case Variant::kMslamCtcNoText: return "mslam-ctc-no-text";
  }
  return "?";
}

std::vector<Variant> all_variants() {
  return {Variant::kSpeechOnly, Variant::kMslamTlm, Variant::kMslamCtc, Variant::kMslamCtcNoText};
}

void TrainConfig::validate() const {
  if (warmup_steps < 1) throw Error("train: warmup_steps must be at least 1");
  if (!(peak_lr > 0)) throw Error("train: peak_lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw Error("train: Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw Error("train: adam_eps must be positive");
  if (clip_norm < 0) throw Error("train: clip_norm must be nonnegative");
  if (quantizer_mode == QuantizerMode::kEval) throw Error("train: the eval quantizer has no gradient path");
  if (!(text_mask_ratio > 0 && text_mask_ratio < 1)) throw Error("train: text_mask_ratio must lie in (0, 1)");
  if (!(speech_start_prob >= 0 && speech_start_prob <= 1)) throw Error("train: speech_start_prob must lie in [0, 1]");
  if (text_span < 1 || speech_span < 1) throw Error("train: span lengths must be positive");
  if (batch.speech == 0 && batch.text == 0 && batch.paired == 0) throw Error("train: empty batch");
  weights.validate();
}

BatchSizes TrainConfig::effective_batch() const {
  BatchSizes b = batch;
  if (variant == Variant::kSpeechOnly) b.text = b.paired = 0;
  if (variant == Variant::kMslamCtcNoText) b.text = 0;
  return b;
}

double TrainConfig::effective_ctc_weight() const {
  return variant == Variant::kMslamTlm || variant == Variant::kSpeechOnly ? 0.0 : weights.paired_ctc;
}

TrainConfig train_preset(const std::string& name) {
  TrainConfig c;
  if (name == "paper-600m") return c;
  if (name == "desk") {
    // Schedule and mask spans scaled to ~1k-step runs on short synthetic
    // utterances (about 2 encoder positions per character).
    c.warmup_steps = 100;
    c.peak_lr = 2e-3;
    c.total_steps = 1500;
    c.batch = {8, 16, 8};
    c.text_span = 3;
    c.speech_span = 2;
    c.speech_start_prob = 0.2;
    // CTC is a per-utterance sum; transcripts here are ~10x shorter than real
    // ones, so the weight is raised by the same factor to keep its share.
    c.weights.paired_ctc = 0.3;
    return c;
  }
  if (name == "paper-2b") {
    c.peak_lr = 3.6e-4;
    return c;
  }
  throw Error("unknown training preset '" + name + "'");
}

double lr_schedule(std::uint64_t step, std::uint64_t warmup, double peak) {
  if (step < 1) throw Error("lr_schedule: step must be at least 1");
  if (step <= warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  return peak * std::sqrt(static_cast<double>(warmup) / static_cast<double>(step));
}

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr, double beta1, double beta2, double eps) {
  if (grads.size() != params.size()) throw Error("adam_step: gradient count differs from parameter count");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto& g = grads[i];
    if (g.size() != w.size()) throw ShapeError("adam_step: gradient size mismatch for parameter " + std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& x : g) x *= s;
  }
  return norm;
}

std::string log_header() { return "step\tlr\ttotal\tcontrastive\tspeech_mlm\ttext_mlm\ttlm\tctc"; }

std::string format_log_line(const StepLosses& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu\t%.6e\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g",
                static_cast<unsigned long long>(s.step), s.lr, s.total, s.contrastive, s.speech_mlm,
                s.text_mlm, s.tlm, s.ctc);
  return buf;
}

Trainer::Trainer(Model& model, const CharVocab& vocab, const TrainData& data, TrainConfig cfg)
    : model_(model), vocab_(vocab), cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto sizes = cfg_.effective_batch();
  const double T = cfg_.sampling_temperature;
  if (sizes.speech) {
    if (data.speech.empty()) throw Error("trainer: variant needs unlabeled speech");
    speech_ = make_stream(data.speech, T, derive_seed(cfg_.seed, {1}));
  }
  if (sizes.text) {
    if (data.text.empty()) throw Error("trainer: variant needs unlabeled text");
    std::vector<EncodedText> enc;
    for (const auto& t : data.text) {
      enc.push_back({t.id, t.language, vocab_.encode(t.text, model_.config().max_text_len)});
    }
    text_ = make_stream(enc, T, derive_seed(cfg_.seed, {2}));
  }
  if (sizes.paired) {
    if (data.paired.empty()) throw Error("trainer: variant needs paired data");
    paired_ = make_stream(data.paired, T, derive_seed(cfg_.seed, {3}));
  }
  params_ = model_.params().tensors();
}

TriModalBatch Trainer::next_batch() {
  return compose_batch(speech_.get(), text_.get(), paired_.get(), cfg_.effective_batch(), vocab_);
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> masked_positions(const std::vector<MaskPlan>& plans) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < plans.size(); ++b)
    for (auto p : plans[b].positions) out.emplace_back(b, p);
  return out;
}

std::string breakdown(const StepLosses& s) {
  std::ostringstream os;
  os << "contrastive=" << s.contrastive << " speech_mlm=" << s.speech_mlm << " text_mlm=" << s.text_mlm
     << " tlm=" << s.tlm << " ctc=" << s.ctc;
  return os.str();
}

}  // namespace

StepGraph Trainer::build_step(const TriModalBatch& batch, std::uint64_t step) const {
  const auto& w = cfg_.weights;
  const double tau = model_.config().gumbel_temperature(step);
  std::mt19937_64 rng(derive_seed(cfg_.seed, {0x73746570ULL, step}));
  StepGraph g;
  g.values.step = step;
  g.values.lr = lr_schedule(step, cfg_.warmup_steps, cfg_.peak_lr);
  Tensor total = Tensor::scalar(0.0);

  auto speech_masks = [&](const std::vector<const FrameSeq*>& frames, std::uint64_t stream) {
    std::vector<MaskPlan> plans;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      plans.push_back(mask_speech_frames(model_.subsampled_length(frames[i]->count), cfg_.speech_start_prob,
                                         cfg_.speech_span, derive_seed(cfg_.seed, {step, stream, i})));
    }
    return plans;
  };

  if (!batch.speech.empty()) {
    std::vector<const FrameSeq*> frames;
    for (const auto& u : batch.speech) frames.push_back(&u.frames);
    const auto plans = speech_masks(frames, 1);
    const auto pos = masked_positions(plans);
    if (!pos.empty()) {
      const auto out = model_.encode_speech(frames, plans);
      const auto q = model_.quantize(gather_positions(out.speech_features, pos), cfg_.quantizer_mode, tau, rng);
      const Tensor ctx = model_.contrastive_projection()(gather_positions(out.contrastive, pos));
      const auto c = contrastive_loss(ctx, q.vectors, q.probs, cfg_.contrastive, rng);
      g.contrastive_too_few = c.too_few;
      const Tensor smlm = mlm_loss(log_softmax(model_.speech_mlm_head()(gather_positions(out.hidden, pos))), q.ids);
      g.values.contrastive = c.loss.item();
      g.values.speech_mlm = smlm.item();
      total = add(total, scale(add(c.loss, smlm), w.speech));
    }
  }

  if (!batch.text.empty()) {
    std::vector<std::vector<int>> ids;
    std::vector<MaskPlan> plans;
    for (std::size_t i = 0; i < batch.text.size(); ++i) {
      ids.push_back(batch.text[i].ids);
      plans.push_back(mask_text_spans(ids.back().size(), cfg_.text_span, cfg_.text_mask_ratio,
                                      derive_seed(cfg_.seed, {step, 2, i})));
    }
    const auto out = model_.encode_text(ids, plans);
    const auto pos = masked_positions(plans);
    std::vector<int> targets;
    for (auto [b, p] : pos) targets.push_back(ids[b][p]);
    const Tensor tm = mlm_loss(model_.mlm_head().log_probs(gather_positions(out.hidden, pos)), targets);
    g.values.text_mlm = tm.item();
    total = add(total, scale(tm, w.text));
  }

  if (!batch.paired.empty()) {
    PairedTargets tg;
    std::vector<const FrameSeq*> frames;
    for (std::size_t i = 0; i < batch.paired.size(); ++i) {
      frames.push_back(&batch.paired[i].frames);
      tg.transcripts.push_back(vocab_.encode(batch.paired[i].transcript, model_.config().max_text_len));
      tg.text_masks.push_back(mask_text_spans(tg.transcripts.back().size(), cfg_.text_span,
                                              cfg_.text_mask_ratio, derive_seed(cfg_.seed, {step, 4, i})));
    }
    tg.speech_masks = speech_masks(frames, 3);
    const auto out = model_.encode_paired(frames, tg.transcripts, tg.speech_masks, tg.text_masks);
    const auto pos = masked_positions(tg.speech_masks);
    if (cfg_.tlm_speech && !pos.empty()) {
      NoGradGuard no_grad;
      tg.speech_codes = model_.quantize(gather_positions(out.speech_features, pos), QuantizerMode::kTrain, tau, rng).ids;
    }
    PairedLossOptions opts;
    opts.tlm_speech = cfg_.tlm_speech;
    opts.compute_ctc = cfg_.effective_ctc_weight() > 0;
    const auto pl = paired_loss(model_, out, tg, opts);
    const Tensor tlm = pl.tlm();
    g.values.tlm = tlm.item();
    g.values.ctc = pl.ctc.item();
    total = add(total, scale(tlm, w.tlm));
    if (opts.compute_ctc) total = add(total, scale(pl.ctc, cfg_.effective_ctc_weight()));
  }

  g.total = total;
  g.values.total = total.item();
  if (!std::isfinite(g.values.total)) {
    throw Error("non-finite loss at step " + std::to_string(step) + ": " + breakdown(g.values));
  }
  return g;
}

StepLosses Trainer::step() {
  const auto batch = next_batch();
  const std::uint64_t s = step_ + 1;
  auto g = build_step(batch, s);
  model_.params().zero_grad();
  g.total.backward();
  std::vector<std::vector<double>> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.push_back(p.grad());
  g.values.grad_norm = clip_global_norm(grads, cfg_.clip_norm);
  adam_step(params_, grads, adam_, g.values.lr, cfg_.beta1, cfg_.beta2, cfg_.adam_eps);
  model_.params().zero_grad();
  step_ = s;
  history_.push_back(g.values);
  return g.values;
}

void Trainer::run(std::uint64_t steps, std::ostream* log) {
  for (std::uint64_t i = 0; i < steps; ++i) {
    const auto s = step();
    if (log) *log << format_log_line(s) << '\n';
  }
}

std::vector<std::uint64_t> Trainer::sampler_positions() const {
  return {speech_ ? speech_->position() : 0, text_ ? text_->position() : 0,
          paired_ ? paired_->position() : 0};
}

void Trainer::save(const std::filesystem::path& path) const {
  auto entries = model_.params().to_entries("param/");
  const auto& pe = model_.params().entries();
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    entries.push_back({"adam_m/" + pe[i].name, pe[i].tensor.shape(), adam_.m[i]});
    entries.push_back({"adam_v/" + pe[i].name, pe[i].tensor.shape(), adam_.v[i]});
  }
  auto as_double = [](std::uint64_t x) { return static_cast<double>(x); };
  entries.push_back({"state/step", {1}, {as_double(step_)}});
  entries.push_back({"state/adam_t", {1}, {as_double(adam_.t)}});
  const auto pos = sampler_positions();
  entries.push_back({"state/sampler", {3}, {as_double(pos[0]), as_double(pos[1]), as_double(pos[2])}});
  entries.push_back({"state/variant", {1}, {as_double(static_cast<std::uint64_t>(cfg_.variant))}});
  write_checkpoint(path, entries);
}

void Trainer::load(const std::filesystem::path& path) {
  const auto entries = read_checkpoint(path);
  model_.params().load_entries(entries, "param/");
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto scalar = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint lacks '" + name + "'");
    return *it->second;
  };
  if (static_cast<Variant>(static_cast<int>(scalar("state/variant").values.at(0))) != cfg_.variant) {
    throw Error("checkpoint was written by a different variant");
  }
  step_ = static_cast<std::uint64_t>(scalar("state/step").values.at(0));
  adam_ = AdamState{};
  adam_.t = static_cast<std::uint64_t>(scalar("state/adam_t").values.at(0));
  if (adam_.t > 0) {
    for (const auto& e : model_.params().entries()) {
      adam_.m.push_back(scalar("adam_m/" + e.name).values);
      adam_.v.push_back(scalar("adam_v/" + e.name).values);
    }
  }
  const auto& pos = scalar("state/sampler").values;
  if (speech_) speech_->seek(static_cast<std::uint64_t>(pos.at(0)));
  if (text_) text_->seek(static_cast<std::uint64_t>(pos.at(1)));
  if (paired_) paired_->seek(static_cast<std::uint64_t>(pos.at(2)));
  history_.clear();
}

}  // namespace jst
