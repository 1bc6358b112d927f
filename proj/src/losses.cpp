#include "jst/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "jst/ops.hpp"
#include "jst/rng.hpp"
#include "jst/vocab.hpp"

namespace jst {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::vector<int> extend_with_blanks(std::span<const int> target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

bool can_skip(const std::vector<int>& ext, std::size_t s, int blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

void check_ctc_inputs(std::size_t frames, std::size_t vocab, std::span<const int> target, int blank) {
  if (blank < 0 || static_cast<std::size_t>(blank) >= vocab) throw Error("ctc: blank id outside vocabulary");
  for (int c : target) {
    if (c == blank) throw Error("ctc: target contains the blank id");
    if (c < 0 || static_cast<std::size_t>(c) >= vocab) throw Error("ctc: target id outside vocabulary");
  }
  if (frames == 0) throw Error("ctc: no frames");
}

}  // namespace

void LossWeights::validate() const {
  if (speech < 0 || text < 0 || paired_ctc < 0 || tlm < 0 || mt_weight < 0) {
    throw Error("loss weights must be nonnegative");
  }
}

std::size_t ctc_min_frames(std::span<const int> target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) n += target[i] == target[i - 1];
  return n;
}

CtcTable ctc_forward(std::span<const double> lp, std::size_t T, std::size_t V,
                     std::span<const int> target, int blank) {
  check_ctc_inputs(T, V, target, blank);
  CtcTable table;
  table.frames = T;
  table.extended = extend_with_blanks(target, blank);
  const auto& ext = table.extended;
  const std::size_t S = ext.size();
  table.states = S;
  table.log_alpha.assign(T * S, kNegInf);
  auto& a = table.log_alpha;
  a[0] = lp[static_cast<std::size_t>(ext[0])];
  if (S > 1) a[1] = lp[static_cast<std::size_t>(ext[1])];
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double v = a[(t - 1) * S + s];
      if (s >= 1) v = log_add(v, a[(t - 1) * S + s - 1]);
      if (can_skip(ext, s, blank)) v = log_add(v, a[(t - 1) * S + s - 2]);
      a[t * S + s] = v == kNegInf ? kNegInf : v + lp[t * V + static_cast<std::size_t>(ext[s])];
    }
  }
  return table;
}

CtcResult ctc_loss(const Tensor& log_probs, std::span<const int> target, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss: expected [frames, vocab], got " + shape_str(log_probs.shape()));
  const std::size_t T = log_probs.dim(0), V = log_probs.dim(1);
  check_ctc_inputs(T, V, target, blank);
  if (T < ctc_min_frames(target)) {
    return {Tensor::scalar(std::numeric_limits<double>::infinity()), false};
  }
  auto table = std::make_shared<CtcTable>(ctc_forward(log_probs.data(), T, V, target, blank));
  const std::size_t S = table->states;
  double log_p = table->at(T - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, table->at(T - 1, S - 2));
  if (log_p == kNegInf) return {Tensor::scalar(std::numeric_limits<double>::infinity()), false};

  Tensor loss = make_result({}, {-log_p}, {log_probs}, [table, T, V, S, log_p, blank](Node& self) {
    const auto& lp = self.inputs[0]->value;
    const auto& ext = table->extended;
    // beta[t][s]: log mass of completing the target from state s at frame t,
    // excluding the emission at t.
    std::vector<double> beta(T * S, kNegInf);
    beta[(T - 1) * S + S - 1] = 0.0;
    if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
    for (std::size_t t = T - 1; t-- > 0;) {
      for (std::size_t s = 0; s < S; ++s) {
        double v = beta[(t + 1) * S + s] + lp[(t + 1) * V + static_cast<std::size_t>(ext[s])];
        if (s + 1 < S) {
          v = log_add(v, beta[(t + 1) * S + s + 1] + lp[(t + 1) * V + static_cast<std::size_t>(ext[s + 1])]);
        }
        if (s + 2 < S && can_skip(ext, s + 2, blank)) {
          v = log_add(v, beta[(t + 1) * S + s + 2] + lp[(t + 1) * V + static_cast<std::size_t>(ext[s + 2])]);
        }
        beta[t * S + s] = v;
      }
    }
    auto& g = self.inputs[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t t = 0; t < T; ++t) {
      // Occupancy of each label at frame t, summed over the states carrying it.
      std::map<int, double> occ;
      for (std::size_t s = 0; s < S; ++s) {
        const double v = table->at(t, s) + beta[t * S + s];
        if (v == kNegInf) continue;
        auto [it, inserted] = occ.emplace(ext[s], v);
        if (!inserted) it->second = log_add(it->second, v);
      }
      for (const auto& [k, v] : occ) g[t * V + static_cast<std::size_t>(k)] -= up * std::exp(v - log_p);
    }
  });
  return {loss, true};
}

std::vector<int> ctc_collapse(std::span<const int> path, int blank) {
  std::vector<int> out;
  int prev = -1;
  bool first = true;
  for (int c : path) {
    if ((first || c != prev) && c != blank) out.push_back(c);
    prev = c;
    first = false;
  }
  return out;
}

double ctc_brute_force(std::span<const double> lp, std::size_t T, std::size_t V,
                       std::span<const int> target, int blank) {
  check_ctc_inputs(T, V, target, blank);
  if (T < ctc_min_frames(target)) return std::numeric_limits<double>::infinity();
  const std::vector<int> want(target.begin(), target.end());
  std::vector<int> path(T, 0);
  double total = kNegInf;
  while (true) {
    if (ctc_collapse(path, blank) == want) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += lp[t * V + static_cast<std::size_t>(path[t])];
      total = log_add(total, s);
    }
    std::size_t t = 0;
    while (t < T && ++path[t] == static_cast<int>(V)) path[t++] = 0;
    if (t == T) break;
  }
  return -total;
}

std::vector<std::vector<std::size_t>> sample_distractors(std::size_t n, std::size_t k,
                                                         std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> out(n);
  if (n == 0) return out;
  const std::size_t take = std::min(k, n - 1);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < n; ++i) {
    pool.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) pool.push_back(j);
    for (std::size_t j = 0; j < take; ++j) {
      std::swap(pool[j], pool[j + uniform_index(rng, pool.size() - j)]);
    }
    out[i].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

ContrastiveResult contrastive_loss(const Tensor& context, const Tensor& targets,
                                   const std::vector<std::vector<std::size_t>>& distractors,
                                   double temperature) {
  if (context.rank() != 2 || context.shape() != targets.shape()) {
    throw ShapeError("contrastive_loss: context " + shape_str(context.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  const std::size_t N = context.dim(0);
  if (N == 0) throw Error("contrastive_loss: no masked positions");
  if (distractors.size() != N) throw Error("contrastive_loss: one distractor list per position required");
  const std::size_t K = distractors[0].size();
  std::vector<std::int64_t> cells;
  cells.reserve(N * (K + 1));
  for (std::size_t i = 0; i < N; ++i) {
    if (distractors[i].size() != K) throw Error("contrastive_loss: ragged distractor lists");
    cells.push_back(static_cast<std::int64_t>(i * N + i));
    for (auto j : distractors[i]) {
      if (j >= N || j == i) throw Error("contrastive_loss: invalid distractor index");
      cells.push_back(static_cast<std::int64_t>(i * N + j));
    }
  }
  const Tensor sims = matmul(l2_normalize(context), l2_normalize(targets), true);
  const Tensor logits = scale(reshape(select_rows(reshape(sims, {N * N}), cells), {N, K + 1}), 1.0 / temperature);
  const std::vector<int> positive(N, 0);
  ContrastiveResult r;
  r.contrastive = cross_entropy(logits, positive);
  r.loss = r.contrastive;
  r.distractors = K;
  return r;
}

ContrastiveResult contrastive_loss(const Tensor& context, const Tensor& targets,
                                   const Tensor& codebook_probs, const ContrastiveOptions& opts,
                                   std::mt19937_64& rng) {
  const std::size_t N = context.rank() == 2 ? context.dim(0) : 0;
  auto r = contrastive_loss(context, targets, sample_distractors(N, opts.n_distractors, rng), opts.temperature);
  r.too_few = r.distractors < opts.n_distractors;
  if (codebook_probs.defined()) {
    r.diversity = diversity_loss(codebook_probs);
    r.loss = add(r.contrastive, scale(r.diversity, opts.diversity_weight));
  }
  return r;
}

Tensor diversity_loss(const Tensor& codebook_probs) {
  if (codebook_probs.rank() != 2) throw ShapeError("diversity_loss: expected [N, V], got " + shape_str(codebook_probs.shape()));
  const double V = static_cast<double>(codebook_probs.dim(1));
  const Tensor p = mean_rows(codebook_probs);
  const Tensor entropy = scale(sum(mul(p, log(add_scalar(p, 1e-30)))), -1.0);
  return scale(add_scalar(scale(exp(entropy), -1.0), V), 1.0 / V);
}

Tensor mlm_loss(const Tensor& log_probs, std::span<const int> targets) {
  if (targets.empty()) throw Error("mlm_loss: no masked positions");
  return nll_loss(log_probs, targets);
}

Tensor gather_positions(const Tensor& x,
                        const std::vector<std::pair<std::size_t, std::size_t>>& positions) {
  if (x.rank() != 3) throw ShapeError("gather_positions: expected [B, T, d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  std::vector<std::int64_t> rows;
  rows.reserve(positions.size());
  for (auto [b, t] : positions) {
    if (b >= B || t >= T) throw ShapeError("gather_positions: position outside " + shape_str(x.shape()));
    rows.push_back(static_cast<std::int64_t>(b * T + t));
  }
  return select_rows(reshape(x, {B * T, d}), rows);
}

Tensor PairedLoss::tlm() const { return add(tlm_text, tlm_speech); }

PairedLoss paired_loss(const Model& model, const EncoderOutput& out, const PairedTargets& targets,
                       const PairedLossOptions& opts) {
  const std::size_t B = out.batch;
  if (targets.transcripts.size() != B) throw Error("paired_loss: one transcript per item required");
  PairedLoss r;

  std::vector<std::pair<std::size_t, std::size_t>> text_pos;
  std::vector<int> text_ids;
  for (std::size_t b = 0; b < B && !targets.text_masks.empty(); ++b) {
    for (auto p : targets.text_masks[b].positions) {
      if (out.boundary[b] + p >= out.lengths[b]) throw Error("paired_loss: text mask beyond transcript");
      text_pos.emplace_back(b, out.boundary[b] + p);
      text_ids.push_back(targets.transcripts[b].at(p));
    }
  }
  r.tlm_text = text_pos.empty()
                   ? Tensor::scalar(0.0)
                   : mlm_loss(model.mlm_head().log_probs(gather_positions(out.hidden, text_pos)), text_ids);

  std::vector<std::pair<std::size_t, std::size_t>> speech_pos;
  for (std::size_t b = 0; b < B && !targets.speech_masks.empty(); ++b) {
    for (auto p : targets.speech_masks[b].positions) {
      if (p >= out.boundary[b]) throw Error("paired_loss: speech mask beyond the speech segment");
      speech_pos.emplace_back(b, p);
    }
  }
  if (opts.tlm_speech && !speech_pos.empty()) {
    if (targets.speech_codes.size() != speech_pos.size()) throw Error("paired_loss: one codebook id per masked speech position required");
    const Tensor logits = model.speech_mlm_head()(gather_positions(out.hidden, speech_pos));
    r.tlm_speech = mlm_loss(log_softmax(logits), targets.speech_codes);
  } else {
    r.tlm_speech = Tensor::scalar(0.0);
  }

  if (!opts.compute_ctc) {
    r.ctc = Tensor::scalar(0.0);
    return r;
  }
  // CTC reads every speech position of the MLM-block output through the
  // shared character softmax.
  std::vector<std::pair<std::size_t, std::size_t>> all_speech;
  std::vector<std::size_t> offset{0};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < out.boundary[b]; ++t) all_speech.emplace_back(b, t);
    offset.push_back(all_speech.size());
  }
  r.ctc_positions = all_speech.size();
  const Tensor lp = model.ctc_head().log_probs(gather_positions(out.hidden, all_speech));
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = offset[b]; i < offset[b + 1]; ++i) rows.push_back(static_cast<std::int64_t>(i));
    auto res = ctc_loss(select_rows(lp, rows), targets.transcripts[b], kBlankId);
    r.ctc_feasible = r.ctc_feasible && res.feasible;
    total = add(total, res.loss);
  }
  r.ctc = scale(total, 1.0 / static_cast<double>(B));
  return r;
}

}  // namespace jst
