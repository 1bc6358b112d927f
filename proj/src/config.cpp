#include "jst/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "jst/params.hpp"

namespace jst {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(origin + ":" + std::to_string(no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(origin + ":" + std::to_string(no) + ": empty key");
    if (!c.values_.emplace(key, trim(line.substr(eq + 1))).second) {
      throw Error(origin + ":" + std::to_string(no) + ": duplicate key '" + key + "'");
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
  used_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  if (!has(key)) {
    used_.insert(key);
    return fallback;
  }
  const auto s = get(key, "");
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': '" + s + "' is not a number");
  }
}

std::uint64_t Config::get_uint(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) {
    used_.insert(key);
    return fallback;
  }
  const auto s = get(key, "");
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error("config key '" + key + "': '" + s + "' is not a nonnegative integer");
  }
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) {
    used_.insert(key);
    return fallback;
  }
  const auto s = get(key, "");
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw Error("config key '" + key + "': '" + s + "' is not a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key,
                                          const std::vector<std::string>& fallback) const {
  if (!has(key)) {
    used_.insert(key);
    return fallback;
  }
  std::vector<std::string> out;
  std::istringstream in(get(key, ""));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) {
    used_.insert(key);
    return fallback;
  }
  std::vector<double> out;
  for (const auto& s : get_list(key, {})) {
    try {
      out.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw Error("config key '" + key + "': '" + s + "' is not a number");
    }
  }
  return out;
}

std::vector<std::string> Config::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

std::string Config::canonical() const {
  std::string s;
  for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
  return s;
}

std::uint64_t Config::hash() const {
  const auto s = canonical();
  return fnv1a(s.data(), s.size());
}

ModelConfig model_config_from(const Config& c) {
  ModelConfig m = model_preset(c.get("model.preset", "desk"));
  m.model_dim = c.get_uint("model.dim", m.model_dim);
  m.ff_dim = c.get_uint("model.ff_dim", m.ff_dim);
  m.n_layers_contrastive = c.get_uint("model.layers_contrastive", m.n_layers_contrastive);
  m.n_layers_mlm = c.get_uint("model.layers_mlm", m.n_layers_mlm);
  m.heads = c.get_uint("model.heads", m.heads);
  m.conv_kernel = c.get_uint("model.conv_kernel", m.conv_kernel);
  m.max_relative = c.get_uint("model.max_relative", m.max_relative);
  m.subsample_factor = c.get_uint("model.subsample_factor", m.subsample_factor);
  m.codebook_size = c.get_uint("model.codebook_size", m.codebook_size);
  m.codebook_dim = c.get_uint("model.codebook_dim", m.codebook_dim);
  m.frame_dim = c.get_uint("model.frame_dim", m.frame_dim);
  m.vocab_size = c.get_uint("model.vocab_size", m.vocab_size);
  m.max_text_len = c.get_uint("model.max_text_len", m.max_text_len);
  m.tie_embeddings = c.get_bool("model.tie_embeddings", m.tie_embeddings);
  m.gumbel_start = c.get_double("model.gumbel_start", m.gumbel_start);
  m.gumbel_min = c.get_double("model.gumbel_min", m.gumbel_min);
  m.gumbel_decay = c.get_double("model.gumbel_decay", m.gumbel_decay);
  m.validate();
  return m;
}

TrainConfig train_config_from(const Config& c) {
  TrainConfig t = train_preset(c.get("train.preset", "paper-600m"));
  t.warmup_steps = c.get_uint("train.warmup_steps", t.warmup_steps);
  t.peak_lr = c.get_double("train.peak_lr", t.peak_lr);
  t.total_steps = c.get_uint("train.steps", t.total_steps);
  t.batch.speech = c.get_uint("train.batch_speech", t.batch.speech);
  t.batch.text = c.get_uint("train.batch_text", t.batch.text);
  t.batch.paired = c.get_uint("train.batch_paired", t.batch.paired);
  t.seed = c.get_uint("train.seed", t.seed);
  t.beta1 = c.get_double("train.adam_beta1", t.beta1);
  t.beta2 = c.get_double("train.adam_beta2", t.beta2);
  t.adam_eps = c.get_double("train.adam_eps", t.adam_eps);
  t.clip_norm = c.get_double("train.clip_norm", t.clip_norm);
  t.variant = parse_variant(c.get("train.variant", variant_name(t.variant)));
  t.sampling_temperature = c.get_double("train.sampling_temperature", t.sampling_temperature);
  t.weights.speech = c.get_double("loss.speech", t.weights.speech);
  t.weights.text = c.get_double("loss.text", t.weights.text);
  t.weights.paired_ctc = c.get_double("loss.paired_ctc", t.weights.paired_ctc);
  t.weights.tlm = c.get_double("loss.tlm", t.weights.tlm);
  t.weights.mt_weight = c.get_double("loss.mt_weight", t.weights.mt_weight);
  t.tlm_speech = c.get_bool("loss.tlm_speech", t.tlm_speech);
  t.contrastive.n_distractors = c.get_uint("loss.distractors", t.contrastive.n_distractors);
  t.contrastive.temperature = c.get_double("loss.contrastive_temperature", t.contrastive.temperature);
  t.contrastive.diversity_weight = c.get_double("loss.diversity_weight", t.contrastive.diversity_weight);
  t.text_span = c.get_uint("mask.text_span", t.text_span);
  t.text_mask_ratio = c.get_double("mask.text_ratio", t.text_mask_ratio);
  t.speech_start_prob = c.get_double("mask.speech_start_prob", t.speech_start_prob);
  t.speech_span = c.get_uint("mask.speech_span", t.speech_span);
  t.validate();
  return t;
}

SynthSpec synth_spec_from(const Config& c) {
  SynthSpec s;
  s.languages = c.get_list("synth.languages", s.languages);
  s.chars_per_language = c.get_uint("synth.chars_per_language", s.chars_per_language);
  s.frames_per_char = c.get_uint("synth.frames_per_char", s.frames_per_char);
  s.frame_dim = c.get_uint("synth.frame_dim", s.frame_dim);
  s.noise_std = c.get_double("synth.noise_std", s.noise_std);
  s.paired_languages = c.get_list("synth.paired_languages", s.paired_languages);
  s.paired_per_language = c.get_uint("synth.paired_per_language", s.paired_per_language);
  s.min_chars = c.get_uint("synth.min_chars", s.min_chars);
  s.max_chars = c.get_uint("synth.max_chars", s.max_chars);
  s.prototype_seed = c.get_uint("synth.prototype_seed", s.prototype_seed);
  for (const auto& entry : c.get_list("synth.script_map", {})) {
    const auto colon = entry.find(':');
    if (colon == std::string::npos) throw Error("synth.script_map entries look like 'lang:script'");
    s.script_map[entry.substr(0, colon)] = entry.substr(colon + 1);
  }
  s.validate();
  return s;
}

}  // namespace jst
