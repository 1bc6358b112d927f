#include "jst/probe.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "jst/losses.hpp"
#include "jst/rng.hpp"
#include "jst/trainer.hpp"

namespace jst {

std::vector<int> greedy_ctc_ids(std::span<const double> lp, std::size_t frames, std::size_t vocab,
                                int blank) {
  std::vector<int> path(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = lp.data() + t * vocab;
    path[t] = static_cast<int>(std::max_element(row, row + vocab) - row);
  }
  return ctc_collapse(path, blank);
}

std::string greedy_ctc_decode(const Tensor& log_probs, const CharVocab& vocab, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("greedy_ctc_decode: expected [frames, vocab], got " + shape_str(log_probs.shape()));
  return vocab.decode(greedy_ctc_ids(log_probs.data(), log_probs.dim(0), log_probs.dim(1), blank));
}

std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(const std::string& hypothesis, const std::string& reference) {
  const auto ref = utf8_decode(reference);
  if (ref.empty()) throw Error("cer: empty reference");
  return static_cast<double>(edit_distance(utf8_decode(hypothesis), ref)) / static_cast<double>(ref.size());
}

namespace {

constexpr std::size_t kChunk = 32;

/// Final-layer outputs of each example, one [len, dim] tensor per example.
std::vector<Tensor> frozen_features(const Model& encoder, const CharVocab& vocab,
                                    const std::vector<PairedExample>& data, Modality modality) {
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  const std::size_t d = encoder.config().model_dim;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    EncoderOutput enc;
    if (modality == Modality::kSpeech) {
      std::vector<const FrameSeq*> frames;
      for (std::size_t i = start; i < end; ++i) frames.push_back(&data[i].frames);
      enc = encoder.encode_speech(frames, {});
    } else {
      std::vector<std::vector<int>> ids;
      for (std::size_t i = start; i < end; ++i) ids.push_back(vocab.encode(data[i].transcript, encoder.config().max_text_len));
      enc = encoder.encode_text(ids, {});
    }
    const auto h = enc.hidden.data();
    for (std::size_t b = 0; b < end - start; ++b) {
      const std::size_t len = enc.lengths[b];
      const auto first = h.begin() + static_cast<std::ptrdiff_t>(b * enc.max_len * d);
      out.push_back(Tensor::from({len, d}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(len * d))));
    }
  }
  return out;
}

}  // namespace

CtcProbe fit_ctc_probe(const Model& encoder, const CharVocab& vocab,
                       const std::vector<PairedExample>& data, const ProbeConfig& cfg) {
  if (data.empty()) throw Error("fit_ctc_probe: no paired data");
  const std::uint64_t before = encoder.params().hash();
  const auto feats = frozen_features(encoder, vocab, data, Modality::kSpeech);
  std::vector<std::vector<int>> targets;
  for (const auto& ex : data) targets.push_back(vocab.encode(ex.transcript, encoder.config().max_text_len));

  CtcProbe probe;
  std::mt19937_64 init(derive_seed(cfg.seed, {0x70726f6265ULL}));
  probe.head = Linear(probe.params, "probe", encoder.config().model_dim, encoder.config().vocab_size, init);
  auto w = probe.head.weight.mutable_data();
  auto b = probe.head.bias.mutable_data();
  if (cfg.init == ProbeInit::kPretrained) {
    const auto& soft = encoder.ctc_head();
    const std::size_t V = encoder.config().vocab_size, d = encoder.config().model_dim;
    for (std::size_t v = 0; v < V; ++v) {
      for (std::size_t k = 0; k < d; ++k) w[k * V + v] = soft.weight.at(v * d + k);
      b[v] = soft.bias.at(v);
    }
  } else {
    std::fill(w.begin(), w.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.0);
  }
  auto params = probe.params.tensors();
  AdamState adam;
  std::mt19937_64 rng(derive_seed(cfg.seed, {0x6669742dULL}));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor total = Tensor::scalar(0.0);
    const std::size_t n = std::min(cfg.batch, data.size());
    for (std::size_t k = 0; k < n; ++k) {
      if (cursor == order.size()) {
        shuffle_in_place(order, rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      auto r = ctc_loss(probe.log_probs(feats[i]), targets[i], kBlankId);
      if (!r.feasible) throw Error("fit_ctc_probe: transcript of '" + data[i].id + "' is longer than its encoding");
      total = add(total, r.loss);
    }
    total = scale(total, 1.0 / static_cast<double>(n));
    probe.params.zero_grad();
    total.backward();
    std::vector<std::vector<double>> grads;
    for (const auto& p : params) grads.push_back(p.grad());
    adam_step(params, grads, adam, cfg.lr, 0.9, 0.98, 1e-9);
    probe.loss_trace.push_back(total.item());
  }
  probe.params.zero_grad();
  if (encoder.params().hash() != before) throw Error("fit_ctc_probe: encoder parameters changed during probing");
  return probe;
}

double ProbeResult::mean_asr() const {
  double s = 0;
  for (const auto& [l, v] : asr_cer) s += v;
  return asr_cer.empty() ? 0.0 : s / static_cast<double>(asr_cer.size());
}

double ProbeResult::mean_cae() const {
  double s = 0;
  for (const auto& [l, v] : cae_cer) s += v;
  return cae_cer.empty() ? 0.0 : s / static_cast<double>(cae_cer.size());
}

std::string ProbeResult::report() const {
  std::string out = "lang\tasr_cer\tcae_cer\n";
  std::map<std::string, bool> langs;
  for (const auto& [l, v] : asr_cer) langs[l] = true;
  for (const auto& [l, v] : cae_cer) langs[l] = true;
  char buf[128];
  auto cell = [&](const std::map<std::string, double>& m, const std::string& l) {
    auto it = m.find(l);
    if (it == m.end()) return std::string("-");
    std::snprintf(buf, sizeof buf, "%.4f", it->second);
    return std::string(buf);
  };
  for (const auto& [l, unused] : langs) out += l + "\t" + cell(asr_cer, l) + "\t" + cell(cae_cer, l) + "\n";
  if (!samples.empty()) {
    out += "\nlang\tinput\treference\thypothesis\n";
    for (const auto& s : samples) {
      out += s.language + "\t" + (s.modality == Modality::kSpeech ? "speech" : "text") + "\t" + s.reference +
             "\t" + s.hypothesis + "\n";
    }
  }
  return out;
}

void run_probe(const CtcProbe& probe, const Model& encoder, const CharVocab& vocab,
               const std::vector<PairedExample>& data, Modality modality, ProbeResult& result,
               std::size_t samples_per_language) {
  NoGradGuard no_grad;
  const auto feats = frozen_features(encoder, vocab, data, modality);
  std::map<std::string, std::pair<std::size_t, std::size_t>> edits;  // language -> (edits, ref chars)
  std::map<std::string, std::size_t> shown;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto hyp = greedy_ctc_decode(probe.log_probs(feats[i]), vocab);
    const auto ref = utf8_decode(data[i].transcript);
    auto& e = edits[data[i].language];
    e.first += edit_distance(utf8_decode(hyp), ref);
    e.second += ref.size();
    if (shown[data[i].language]++ < samples_per_language) {
      result.samples.push_back({data[i].language, modality, data[i].transcript, hyp});
    }
  }
  auto& column = modality == Modality::kSpeech ? result.asr_cer : result.cae_cer;
  for (const auto& [lang, e] : edits) {
    column[lang] = static_cast<double>(e.first) / static_cast<double>(std::max<std::size_t>(e.second, 1));
  }
}

}  // namespace jst
