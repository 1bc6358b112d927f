#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "jst/corpus.hpp"
#include "jst/model.hpp"
#include "jst/trainer.hpp"

namespace jst {

/// Line-oriented `key = value` file with dotted keys (model.dim,
/// train.peak_lr). '#' starts a comment.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

  /// Keys never read through a getter; typos show up here.
  std::vector<std::string> unused_keys() const;
  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical "key = value" text (sorted), the input to the config hash.
  std::string canonical() const;
  std::uint64_t hash() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

/// Starts from the model.preset preset and applies model.* overrides.
ModelConfig model_config_from(const Config& c);
/// Starts from train.preset and applies train.* / loss.* / mask.* overrides.
TrainConfig train_config_from(const Config& c);
SynthSpec synth_spec_from(const Config& c);

}  // namespace jst
