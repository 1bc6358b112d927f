#include "jst/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "jst/rng.hpp"
#include "jst/trainer.hpp"

namespace jst {

namespace {

LabeledExample make_example(const SynthSpec& synth, const std::string& id, const std::string& lang,
                            const std::u32string& text, int label, std::mt19937_64& rng) {
  return {id, lang, render_speech(synth, text, rng), utf8_encode(text), label};
}

std::vector<std::vector<double>> grads_of(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> g;
  g.reserve(params.size());
  for (const auto& p : params) g.push_back(p.grad());
  return g;
}

void zero_all(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace

LabeledSplits make_keyword_task(const SynthSpec& synth, const KeywordTaskSpec& task, std::uint64_t seed) {
  synth.validate();
  if (task.classes < 2) throw Error("keyword task: need at least two classes");
  if (task.languages.empty()) throw Error("keyword task: no languages");
  if (task.classes >= synth.chars_per_language) throw Error("keyword task: markers would leave no filler characters");
  if (synth.max_chars < 2) throw Error("keyword task: sentences too short for a marker");
  std::mt19937_64 rng(derive_seed(seed, {0x6b6579ULL}));
  std::vector<std::size_t> slots(synth.chars_per_language);
  std::iota(slots.begin(), slots.end(), 0);
  shuffle_in_place(slots, rng);
  slots.resize(task.classes);

  LabeledSplits out;
  out.classes = task.classes;
  auto fill = [&](std::vector<LabeledExample>& split, std::size_t per_class, const std::string& tag) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < task.classes; ++k) {
        const auto& lang = task.languages[(i * task.classes + k) % task.languages.size()];
        const auto inv = synth_inventory(synth, lang);
        std::u32string markers;
        for (auto s : slots) markers.push_back(inv[s]);
        auto s = sample_sentence(synth, lang, rng, markers);
        if (s.size() >= synth.max_chars) s.resize(synth.max_chars - 1);
        s.insert(s.begin() + static_cast<std::ptrdiff_t>(uniform_index(rng, s.size() + 1)), markers[k]);
        split.push_back(make_example(synth, tag + "-" + std::to_string(split.size()), lang, s,
                                     static_cast<int>(k), rng));
      }
    }
  };
  fill(out.train, task.train_per_class, "train");
  fill(out.dev, task.dev_per_class, "dev");
  fill(out.test, task.test_per_class, "test");
  return out;
}

LabeledSplits make_random_label_task(const SynthSpec& synth, std::size_t classes, std::size_t train,
                                     std::size_t dev, std::size_t test, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0x72616e64ULL}));
  LabeledSplits out;
  out.classes = classes;
  auto fill = [&](std::vector<LabeledExample>& split, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& lang = synth.languages[i % synth.languages.size()];
      const int label = static_cast<int>(i % classes);
      split.push_back(make_example(synth, "r" + std::to_string(i), lang, sample_sentence(synth, lang, rng), label, rng));
    }
  };
  fill(out.train, train);
  fill(out.dev, dev);
  fill(out.test, test);
  return out;
}

LabeledSplits make_language_id_task(const SynthSpec& synth, std::size_t per_language_train,
                                    std::size_t per_language_eval, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0x6c6964ULL}));
  LabeledSplits out;
  out.classes = synth.languages.size();
  auto fill = [&](std::vector<LabeledExample>& split, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t l = 0; l < synth.languages.size(); ++l) {
        const auto& lang = synth.languages[l];
        split.push_back(make_example(synth, lang + "-" + std::to_string(i), lang,
                                     sample_sentence(synth, lang, rng), static_cast<int>(l), rng));
      }
    }
  };
  fill(out.train, per_language_train);
  fill(out.dev, per_language_eval);
  fill(out.test, per_language_eval);
  return out;
}

EncoderOutput encode_examples(const Model& encoder, const CharVocab& vocab,
                              const std::vector<const LabeledExample*>& batch, Modality modality) {
  if (modality == Modality::kSpeech) {
    std::vector<const FrameSeq*> frames;
    for (const auto* ex : batch) {
      if (ex->frames.count == 0) throw Error("example '" + ex->id + "' has no speech input");
      frames.push_back(&ex->frames);
    }
    return encoder.encode_speech(frames, {});
  }
  std::vector<std::vector<int>> ids;
  for (const auto* ex : batch) {
    if (ex->text.empty()) throw Error("example '" + ex->id + "' has no text input");
    ids.push_back(vocab.encode(ex->text, encoder.config().max_text_len));
  }
  return encoder.encode_text(ids, {});
}

ClassifierHead::ClassifierHead(std::size_t dim, std::size_t classes, bool project, std::mt19937_64& rng) {
  if (classes < 2) throw Error("classifier head needs at least two classes");
  if (project) projection = Linear(params, "proj", dim, dim, rng);
  output = Linear(params, "out", dim, classes, rng);
}

Tensor ClassifierHead::logits(const EncoderOutput& out) const {
  Tensor h = projection ? (*projection)(out.hidden) : out.hidden;
  return output(max_pool_time(h, out.lengths));
}

std::string ClassifierGridPoint::str() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "batch=%zu lr=%g projection=%s epochs=%zu", batch, lr,
                projection ? "model_dim" : "none", epochs);
  return buf;
}

std::vector<ClassifierGridPoint> ClassifierGrid::points() const {
  if (epoch_divisor == 0) throw Error("classifier grid: epoch divisor must be positive");
  std::vector<ClassifierGridPoint> out;
  for (auto b : batch_sizes)
    for (auto lr : lrs)
      for (bool p : projections)
        for (auto e : epochs) out.push_back({b, lr, p, (e + epoch_divisor - 1) / epoch_divisor});
  if (out.empty()) throw Error("classifier grid is empty");
  return out;
}

double classifier_accuracy(const Model& encoder, const ClassifierHead& head, const CharVocab& vocab,
                           const std::vector<LabeledExample>& data, Modality modality) {
  if (data.empty()) throw Error("classifier_accuracy: empty evaluation set");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += 32) {
    std::vector<const LabeledExample*> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + 32); ++i) batch.push_back(&data[i]);
    const Tensor logits = head.logits(encode_examples(encoder, vocab, batch, modality));
    const std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const double* row = logits.data().data() + b * C;
      correct += static_cast<int>(std::max_element(row, row + C) - row) == batch[b]->label;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ClassifierResult finetune_classifier(const Model& pretrained, const CharVocab& vocab,
                                     const LabeledSplits& data, Modality modality,
                                     const ClassifierConfig& cfg) {
  if (data.train.empty() || data.dev.empty() || data.test.empty()) throw Error("finetune_classifier: empty split");
  const auto points = cfg.grid.points();
  // A frozen encoder gives the same per-example states every epoch; encode once.
  std::vector<std::vector<double>> cached(cfg.train_encoder ? 0 : data.train.size());
  std::vector<std::size_t> cached_len(cached.size());
  const std::size_t dim = pretrained.config().model_dim;
  for (std::size_t i = 0; i < cached.size(); ++i) {
    NoGradGuard no_grad;
    const EncoderOutput out = encode_examples(pretrained, vocab, {&data.train[i]}, modality);
    cached_len[i] = out.lengths[0];
    cached[i].assign(out.hidden.data().begin(), out.hidden.data().begin() + out.lengths[0] * dim);
  }
  ClassifierResult best;
  bool have_best = false;
  for (std::size_t gi = 0; gi < points.size(); ++gi) {
    const auto& pt = points[gi];
    std::mt19937_64 rng(derive_seed(cfg.seed, {0x636c73ULL, gi}));
    auto encoder = pretrained.clone();
    auto head = std::make_unique<ClassifierHead>(pretrained.config().model_dim, data.classes, pt.projection, rng);
    std::vector<Tensor> params = head->params.tensors();
    if (cfg.train_encoder) {
      for (const auto& t : encoder->params().tensors()) params.push_back(t);
    }
    AdamState adam;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < pt.epochs; ++epoch) {
      shuffle_in_place(order, rng);
      for (std::size_t start = 0; start < order.size(); start += pt.batch) {
        std::vector<const LabeledExample*> batch;
        std::vector<int> labels;
        for (std::size_t i = start; i < std::min(order.size(), start + pt.batch); ++i) {
          batch.push_back(&data.train[order[i]]);
          labels.push_back(batch.back()->label);
        }
        EncoderOutput out;
        if (cfg.train_encoder) {
          out = encode_examples(*encoder, vocab, batch, modality);
        } else {
          out.batch = batch.size();
          for (std::size_t i = start; i < start + batch.size(); ++i) {
            out.lengths.push_back(cached_len[order[i]]);
            out.max_len = std::max(out.max_len, cached_len[order[i]]);
          }
          std::vector<double> h(out.batch * out.max_len * dim, 0.0);
          for (std::size_t b = 0; b < out.batch; ++b) {
            const auto& src = cached[order[start + b]];
            std::copy(src.begin(), src.end(), h.begin() + b * out.max_len * dim);
          }
          out.hidden = Tensor::from({out.batch, out.max_len, dim}, std::move(h));
        }
        const Tensor loss = cross_entropy(head->logits(out), labels);
        zero_all(params);
        loss.backward();
        auto grads = grads_of(params);
        clip_global_norm(grads, cfg.clip_norm);
        adam_step(params, grads, adam, pt.lr, 0.9, 0.98, 1e-9);
      }
    }
    zero_all(params);
    const double dev = classifier_accuracy(*encoder, *head, vocab, data.dev, modality);
    best.dev_scores.emplace_back(pt, dev);
    if (!have_best || dev > best.dev_accuracy) {
      have_best = true;
      best.best = pt;
      best.dev_accuracy = dev;
      best.encoder = std::move(encoder);
      best.head = std::move(head);
    }
  }
  best.test_accuracy = classifier_accuracy(*best.encoder, *best.head, vocab, data.test, modality);
  return best;
}

std::string TransferMatrix::tsv_header() { return "variant\tS->S\tS->T\tT->S\tT->T\tchance"; }

std::string TransferMatrix::tsv(const std::string& label) const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f", label.c_str(), ss, st, ts, tt, chance);
  return buf;
}

TransferMatrix zero_shot_eval(const Model& pretrained, const CharVocab& vocab, const LabeledSplits& data,
                              const ClassifierConfig& cfg) {
  for (const auto* split : {&data.dev, &data.test}) {
    for (const auto& ex : *split) {
      if (ex.frames.count == 0 || ex.text.empty()) throw Error("zero_shot_eval: example '" + ex.id + "' lacks a modality");
    }
  }
  TransferMatrix m;
  m.chance = 1.0 / static_cast<double>(data.classes);
  const auto s = finetune_classifier(pretrained, vocab, data, Modality::kSpeech, cfg);
  m.ss = s.test_accuracy;
  m.st = classifier_accuracy(*s.encoder, *s.head, vocab, data.test, Modality::kText);
  const auto t = finetune_classifier(pretrained, vocab, data, Modality::kText, cfg);
  m.tt = t.test_accuracy;
  m.ts = classifier_accuracy(*t.encoder, *t.head, vocab, data.test, Modality::kSpeech);
  return m;
}

TranslationStandIn::TranslationStandIn(std::u32string inventory, std::uint64_t seed) {
  std::u32string image = inventory;
  std::mt19937_64 rng(derive_seed(seed, {0x7472616eULL}));
  shuffle_in_place(image, rng);
  for (std::size_t i = 0; i < inventory.size(); ++i) map_[inventory[i]] = image[i];
}

std::string TranslationStandIn::operator()(const std::string& text) const {
  std::u32string s = utf8_decode(text);
  for (auto& c : s) {
    auto it = map_.find(c);
    if (it != map_.end()) c = it->second;
  }
  std::reverse(s.begin(), s.end());
  return utf8_encode(s);
}

Seq2SeqHead::Seq2SeqHead(const Seq2SeqConfig& cfg, std::size_t encoder_dim, std::size_t vocab,
                         std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg.layers == 0 || cfg.dim == 0) throw Error("seq2seq: decoder needs layers and a dimension");
  std::mt19937_64 rng(derive_seed(seed, {0x646563ULL}));
  embedding_ = params_.normal("dec.embedding", {vocab, cfg.dim}, 1.0 / std::sqrt(static_cast<double>(cfg.dim)), rng);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const auto n = "dec." + std::to_string(i);
    layers_.push_back({LayerNorm(params_, n + ".self_ln", cfg.dim),
                       MultiHeadAttention(params_, n + ".self", cfg.dim, cfg.dim, cfg.heads, cfg.max_relative, rng),
                       LayerNorm(params_, n + ".cross_ln", cfg.dim),
                       MultiHeadAttention(params_, n + ".cross", cfg.dim, encoder_dim, cfg.heads, 0, rng),
                       FeedForward(params_, n + ".ff", cfg.dim, cfg.ff_dim, rng)});
  }
  out_norm_ = LayerNorm(params_, "dec.out_ln", cfg.dim);
  output_ = Linear(params_, "dec.out", cfg.dim, vocab, rng);
}

Tensor Seq2SeqHead::decode(const Tensor& memory, const std::vector<std::size_t>& memory_lengths,
                           const std::vector<std::vector<int>>& inputs, double dropout_p,
                           std::mt19937_64* rng) const {
  const std::size_t B = inputs.size();
  std::size_t L = 0;
  std::vector<std::size_t> lengths;
  for (const auto& s : inputs) {
    lengths.push_back(s.size());
    L = std::max(L, s.size());
  }
  std::vector<int> flat(B * L, kPadId);
  for (std::size_t b = 0; b < B; ++b) std::copy(inputs[b].begin(), inputs[b].end(), flat.begin() + static_cast<std::ptrdiff_t>(b * L));
  auto drop = [&](const Tensor& t) { return rng && dropout_p > 0 ? dropout(t, dropout_p, *rng) : t; };
  Tensor x = drop(scale(embedding(embedding_, flat, {B, L}), std::sqrt(static_cast<double>(cfg_.dim))));
  for (const auto& layer : layers_) {
    const Tensor a = layer.self_norm(x);
    x = add(x, drop(layer.self_attn(a, a, lengths, true)));
    x = add(x, drop(layer.cross_attn(layer.cross_norm(x), memory, memory_lengths)));
    x = add(x, drop(layer.ff(x)));
  }
  return output_(out_norm_(x));
}

Tensor Seq2SeqHead::loss(const EncoderOutput& memory, const std::vector<std::vector<int>>& targets,
                         double dropout_p, std::mt19937_64& rng) const {
  if (targets.size() != memory.batch) throw Error("seq2seq loss: one target per encoded item required");
  std::vector<std::vector<int>> inputs;
  for (const auto& t : targets) {
    std::vector<int> in{kBosId};
    in.insert(in.end(), t.begin(), t.end());
    inputs.push_back(std::move(in));
  }
  const Tensor logits = decode(memory.hidden, memory.lengths, inputs, dropout_p, &rng);
  const std::size_t L = logits.dim(1), V = logits.dim(2);
  std::vector<std::int64_t> rows;
  std::vector<int> labels;
  for (std::size_t b = 0; b < targets.size(); ++b) {
    for (std::size_t t = 0; t <= targets[b].size(); ++t) {
      rows.push_back(static_cast<std::int64_t>(b * L + t));
      labels.push_back(t < targets[b].size() ? targets[b][t] : kEosId);
    }
  }
  return cross_entropy(select_rows(reshape(logits, {memory.batch * L, V}), rows), labels);
}

std::vector<int> Seq2SeqHead::greedy(const EncoderOutput& memory, std::size_t b, std::size_t max_len) const {
  NoGradGuard no_grad;
  const std::size_t d = memory.hidden.dim(2), T = memory.lengths.at(b);
  std::vector<std::int64_t> rows(T);
  for (std::size_t t = 0; t < T; ++t) rows[t] = memory.row(b, t);
  const Tensor mem = reshape(select_rows(reshape(memory.hidden, {memory.batch * memory.max_len, d}), rows), {1, T, d});
  std::vector<int> seq{kBosId};
  while (seq.size() <= max_len) {
    const Tensor logits = decode(mem, {T}, {seq}, 0.0, nullptr);
    const std::size_t V = logits.dim(2);
    const double* row = logits.data().data() + (seq.size() - 1) * V;
    const int next = static_cast<int>(std::max_element(row, row + V) - row);
    if (next == kEosId) break;
    seq.push_back(next);
  }
  return {seq.begin() + 1, seq.end()};
}

Seq2SeqMetrics seq2seq_metrics(const Model& encoder, const Seq2SeqHead& head, const CharVocab& vocab,
                               const std::vector<SpeechTranslationExample>& eval, std::size_t max_decode) {
  if (eval.empty()) throw Error("seq2seq_metrics: empty evaluation set");
  NoGradGuard no_grad;
  std::size_t matched = 0, total = 0, exact = 0;
  for (std::size_t start = 0; start < eval.size(); start += 32) {
    std::vector<const FrameSeq*> frames;
    for (std::size_t i = start; i < std::min(eval.size(), start + 32); ++i) frames.push_back(&eval[i].frames);
    const auto out = encoder.encode_speech(frames, {});
    for (std::size_t b = 0; b < frames.size(); ++b) {
      const auto hyp = head.greedy(out, b, max_decode);
      const auto ref = vocab.encode(eval[start + b].target, encoder.config().max_text_len);
      for (std::size_t i = 0; i < ref.size(); ++i) matched += i < hyp.size() && hyp[i] == ref[i];
      total += ref.size();
      exact += hyp == ref;
    }
  }
  return {static_cast<double>(matched) / static_cast<double>(std::max<std::size_t>(total, 1)),
          static_cast<double>(exact) / static_cast<double>(eval.size())};
}

Seq2SeqResult finetune_seq2seq(const Model& pretrained, const CharVocab& vocab,
                               const std::vector<SpeechTranslationExample>& st,
                               const std::vector<TextTranslationExample>& mt,
                               const std::vector<SpeechTranslationExample>& eval,
                               const Seq2SeqConfig& cfg) {
  if (st.empty()) throw Error("finetune_seq2seq: no speech translation data");
  Seq2SeqResult r;
  r.encoder = pretrained.clone();
  r.head = std::make_unique<Seq2SeqHead>(cfg, pretrained.config().model_dim, pretrained.config().vocab_size, cfg.seed);
  const bool joint = !mt.empty();
  const double p = joint ? cfg.dropout_joint : cfg.dropout_st;
  std::vector<Tensor> params = r.head->params().tensors();
  if (cfg.train_encoder) {
    for (const auto& t : r.encoder->params().tensors()) params.push_back(t);
  }
  const std::size_t cap = pretrained.config().max_text_len;
  // Separate draw streams keep the ST order independent of the MT data.
  std::mt19937_64 st_rng(derive_seed(cfg.seed, {0x7374ULL})), mt_rng(derive_seed(cfg.seed, {0x6d74ULL}));
  std::vector<std::size_t> st_order(st.size()), mt_order(mt.size());
  std::iota(st_order.begin(), st_order.end(), 0);
  std::iota(mt_order.begin(), mt_order.end(), 0);
  std::size_t st_cursor = st.size(), mt_cursor = mt.size();
  auto draw = [](std::vector<std::size_t>& order, std::size_t& cursor, std::mt19937_64& rng) {
    if (cursor == order.size()) {
      shuffle_in_place(order, rng);
      cursor = 0;
    }
    return order[cursor++];
  };
  const std::size_t n_st = joint ? std::max<std::size_t>(1, cfg.batch / 2) : cfg.batch;
  const std::size_t n_mt = joint ? std::max<std::size_t>(1, cfg.batch - n_st) : 0;
  AdamState adam;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::mt19937_64 drop_rng(derive_seed(cfg.seed, {0x64726f70ULL, step}));
    std::vector<const FrameSeq*> frames;
    std::vector<std::vector<int>> st_targets;
    for (std::size_t i = 0; i < n_st; ++i) {
      const auto& ex = st[draw(st_order, st_cursor, st_rng)];
      frames.push_back(&ex.frames);
      st_targets.push_back(vocab.encode(ex.target, cap));
    }
    Tensor total = r.head->loss(r.encoder->encode_speech(frames, {}), st_targets, p, drop_rng);
    if (joint) {
      std::vector<std::vector<int>> sources, targets;
      for (std::size_t i = 0; i < n_mt; ++i) {
        const auto& ex = mt[draw(mt_order, mt_cursor, mt_rng)];
        sources.push_back(vocab.encode(ex.source, cap));
        targets.push_back(vocab.encode(ex.target, cap));
      }
      const Tensor mt_loss = r.head->loss(r.encoder->encode_text(sources, {}), targets, p, drop_rng);
      total = add(total, scale(mt_loss, cfg.mt_weight));
    }
    zero_all(params);
    total.backward();
    auto grads = grads_of(params);
    clip_global_norm(grads, cfg.clip_norm);
    adam_step(params, grads, adam, cfg.lr, 0.9, 0.98, 1e-9);
    r.loss_trace.push_back(total.item());
  }
  zero_all(params);
  if (!eval.empty()) r.metrics = seq2seq_metrics(*r.encoder, *r.head, vocab, eval, cfg.max_decode);
  return r;
}

}  // namespace jst
