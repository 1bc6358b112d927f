#include "jst/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "jst/rng.hpp"
#include "jst/tensor.hpp"
#include "jst/vocab.hpp"

namespace jst {

namespace {

constexpr char kFeatureMagic[4] = {'J', 'S', 'T', 'F'};

constexpr std::array<char32_t, 10> kScriptBases = {0x61,  0x3B1, 0x430, 0x561, 0x5D0,
                                                   0x627, 0x905, 0xE01, 0x10D0, 0xAC00};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    fields.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return fields;
}

bool blank_after_trim(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::uint64_t string_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t script_index(const SynthSpec& spec, const std::string& language) {
  if (spec.script_map.empty()) return 0;
  std::vector<std::string> scripts;
  for (const auto& lang : spec.languages) {
    auto it = spec.script_map.find(lang);
    const std::string script = it == spec.script_map.end() ? lang : it->second;
    if (std::find(scripts.begin(), scripts.end(), script) == scripts.end()) scripts.push_back(script);
  }
  auto it = spec.script_map.find(language);
  const std::string script = it == spec.script_map.end() ? language : it->second;
  return static_cast<std::size_t>(std::find(scripts.begin(), scripts.end(), script) - scripts.begin());
}

// Per-language unigram weights over the inventory: a Zipf-like profile laid
// over a language-specific permutation.
std::vector<double> unigram_weights(const SynthSpec& spec, const std::string& language) {
  const std::size_t n = spec.chars_per_language;
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[i] = i;
  std::mt19937_64 rng(derive_seed(spec.prototype_seed, {string_hash(language), 0x756e69ULL}));
  shuffle_in_place(rank, rng);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(rank[i] + 1), 0.7);
  return w;
}

}  // namespace

RecordKind parse_record_kind(const std::string& name) {
  if (name == "speech") return RecordKind::kSpeech;
  if (name == "text") return RecordKind::kText;
  if (name == "paired") return RecordKind::kPaired;
  throw Error("unknown manifest kind '" + name + "' (expected speech, text or paired)");
}

void write_features(const std::filesystem::path& path, const FrameSeq& frames) {
  if (frames.values.size() != frames.count * frames.dim) {
    throw Error("frame buffer does not match its declared shape");
  }
  std::string out(kFeatureMagic, sizeof(kFeatureMagic));
  auto put_u32 = [&out](std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
  };
  put_u32(static_cast<std::uint32_t>(frames.count));
  put_u32(static_cast<std::uint32_t>(frames.dim));
  for (double v : frames.values) {
    const auto f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    out.append(b, 4);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write feature file: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

FrameSeq read_features(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("missing feature file: " + path.string());
  char magic[4];
  std::uint32_t count = 0, dim = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&count), 4);
  f.read(reinterpret_cast<char*>(&dim), 4);
  if (!f || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw Error("not a feature file: " + path.string());
  }
  FrameSeq seq;
  seq.count = count;
  seq.dim = dim;
  std::vector<float> raw(static_cast<std::size_t>(count) * dim);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!f) throw Error("truncated feature file: " + path.string());
  seq.values.assign(raw.begin(), raw.end());
  return seq;
}

ManifestReader::ManifestReader(const std::filesystem::path& path, RecordKind kind)
    : path_(path), base_dir_(path.parent_path()), kind_(kind), in_(path) {
  if (!in_) throw Error("cannot open manifest: " + path.string());
}

std::optional<Record> ManifestReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    const std::size_t expected = kind_ == RecordKind::kPaired ? 4 : 3;
    auto fail = [&](const std::string& why) -> Error {
      return Error(path_.string() + ":" + std::to_string(line_no_) + ": " + why);
    };
    if (fields.size() != expected) {
      throw fail("expected " + std::to_string(expected) + " tab-separated fields, got " +
                 std::to_string(fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) throw fail("empty id or language");
    auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base_dir_ / fp;
    };
    auto load_frames = [&](const std::string& p) {
      try {
        auto seq = read_features(resolve(p));
        if (seq.count == 0) throw Error("feature file has no frames");
        return seq;
      } catch (const Error& e) {
        throw fail(e.what());
      }
    };
    switch (kind_) {
      case RecordKind::kSpeech:
        return SpeechUtterance{fields[0], fields[1], load_frames(fields[2])};
      case RecordKind::kText:
        if (blank_after_trim(fields[2])) throw fail("empty text");
        return TextSentence{fields[0], fields[1], fields[2]};
      case RecordKind::kPaired:
        if (blank_after_trim(fields[3])) throw fail("empty transcript");
        return PairedExample{fields[0], fields[1], load_frames(fields[2]), fields[3]};
    }
  }
  return std::nullopt;
}

std::vector<SpeechUtterance> load_speech_manifest(const std::filesystem::path& path) {
  ManifestReader r(path, RecordKind::kSpeech);
  std::vector<SpeechUtterance> out;
  while (auto rec = r.next()) out.push_back(std::get<SpeechUtterance>(std::move(*rec)));
  return out;
}

std::vector<TextSentence> load_text_manifest(const std::filesystem::path& path) {
  ManifestReader r(path, RecordKind::kText);
  std::vector<TextSentence> out;
  while (auto rec = r.next()) out.push_back(std::get<TextSentence>(std::move(*rec)));
  return out;
}

std::vector<PairedExample> load_paired_manifest(const std::filesystem::path& path) {
  ManifestReader r(path, RecordKind::kPaired);
  std::vector<PairedExample> out;
  while (auto rec = r.next()) out.push_back(std::get<PairedExample>(std::move(*rec)));
  return out;
}

void SynthSpec::validate() const {
  if (languages.empty()) throw Error("synthetic spec needs at least one language");
  if (frames_per_char < 1) throw Error("frames_per_char must be >= 1");
  if (noise_std < 0) throw Error("noise_std must be >= 0");
  if (chars_per_language < 2) throw Error("chars_per_language must be >= 2");
  if (frame_dim < 1) throw Error("frame_dim must be >= 1");
  if (min_chars < 1 || max_chars < min_chars) throw Error("invalid sentence length range");
  for (const auto& p : paired_languages) {
    if (std::find(languages.begin(), languages.end(), p) == languages.end()) {
      throw Error("paired language '" + p + "' is not in the language list");
    }
  }
}

std::u32string synth_inventory(const SynthSpec& spec, const std::string& language) {
  const std::size_t s = script_index(spec, language);
  const char32_t base = s < kScriptBases.size()
                            ? kScriptBases[s]
                            : static_cast<char32_t>(0x4E00 + 256 * (s - kScriptBases.size()));
  std::u32string inv;
  for (std::size_t i = 0; i < spec.chars_per_language; ++i) inv.push_back(base + static_cast<char32_t>(i));
  return inv;
}

std::vector<double> char_prototype(const SynthSpec& spec, char32_t c) {
  std::mt19937_64 rng(derive_seed(spec.prototype_seed, {static_cast<std::uint64_t>(c)}));
  std::vector<double> v(spec.frame_dim);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

FrameSeq render_speech(const SynthSpec& spec, std::u32string_view text, std::mt19937_64& rng) {
  FrameSeq seq;
  seq.dim = spec.frame_dim;
  seq.count = text.size() * spec.frames_per_char;
  seq.values.reserve(seq.count * seq.dim);
  for (char32_t c : text) {
    const auto proto = char_prototype(spec, c);
    for (std::size_t f = 0; f < spec.frames_per_char; ++f) {
      for (double p : proto) {
        const double v = spec.noise_std > 0 ? p + spec.noise_std * standard_normal(rng) : p;
        // Stored at feature-file precision so in-memory and on-disk corpora agree.
        seq.values.push_back(static_cast<double>(static_cast<float>(v)));
      }
    }
  }
  return seq;
}

std::u32string sample_sentence(const SynthSpec& spec, const std::string& language,
                               std::mt19937_64& rng, std::u32string_view exclude) {
  const auto inv = synth_inventory(spec, language);
  auto w = unigram_weights(spec, language);
  for (std::size_t i = 0; i < inv.size(); ++i) {
    if (exclude.find(inv[i]) != std::u32string_view::npos) w[i] = 0.0;
  }
  const std::size_t allowed = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) { return x > 0; }));
  if (allowed == 0) throw Error("no characters left to sample for language " + language);
  const std::size_t len = spec.min_chars + uniform_index(rng, spec.max_chars - spec.min_chars + 1);
  std::u32string out;
  while (out.size() < len) {
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (allowed > 1 && !out.empty() && inv[i] == out.back()) continue;
      total += w[i];
    }
    double u = uniform01(rng) * total;
    std::size_t pick = w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] <= 0 || (allowed > 1 && !out.empty() && inv[i] == out.back())) continue;
      pick = i;
      u -= w[i];
      if (u < 0) break;
    }
    out.push_back(inv[pick]);
  }
  return out;
}

SynthCorpus generate_synth(const SynthSpec& spec, std::size_t sentences, std::uint64_t seed) {
  spec.validate();
  SynthCorpus corpus;
  for (const auto& lang : spec.languages) {
    const auto lh = string_hash(lang);
    std::mt19937_64 speech_rng(derive_seed(seed, {lh, 1}));
    std::mt19937_64 text_rng(derive_seed(seed, {lh, 2}));
    for (std::size_t i = 0; i < sentences; ++i) {
      const auto s = sample_sentence(spec, lang, speech_rng);
      corpus.speech.push_back({"sp-" + lang + "-" + std::to_string(i), lang,
                               render_speech(spec, s, speech_rng)});
      corpus.text.push_back({"tx-" + lang + "-" + std::to_string(i), lang,
                             utf8_encode(sample_sentence(spec, lang, text_rng))});
    }
    if (std::find(spec.paired_languages.begin(), spec.paired_languages.end(), lang) !=
        spec.paired_languages.end()) {
      std::mt19937_64 paired_rng(derive_seed(seed, {lh, 3}));
      for (std::size_t i = 0; i < spec.paired_per_language; ++i) {
        const auto s = sample_sentence(spec, lang, paired_rng);
        corpus.paired.push_back({"pr-" + lang + "-" + std::to_string(i), lang,
                                 render_speech(spec, s, paired_rng), utf8_encode(s)});
      }
    }
  }
  return corpus;
}

ManifestPaths write_synth(const SynthCorpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "feats");
  ManifestPaths paths{dir / "speech.tsv", dir / "text.tsv", dir / "paired.tsv"};
  {
    std::ofstream f(paths.speech, std::ios::trunc);
    for (const auto& u : corpus.speech) {
      const auto rel = fs::path("feats") / (u.id + ".jstf");
      write_features(dir / rel, u.frames);
      f << u.id << '\t' << u.language << '\t' << rel.string() << '\n';
    }
  }
  {
    std::ofstream f(paths.text, std::ios::trunc);
    for (const auto& t : corpus.text) f << t.id << '\t' << t.language << '\t' << t.text << '\n';
  }
  {
    std::ofstream f(paths.paired, std::ios::trunc);
    for (const auto& p : corpus.paired) {
      const auto rel = fs::path("feats") / (p.id + ".jstf");
      write_features(dir / rel, p.frames);
      f << p.id << '\t' << p.language << '\t' << rel.string() << '\t' << p.transcript << '\n';
    }
  }
  return paths;
}

ManifestPaths gen_synth(const SynthSpec& spec, std::size_t sentences, std::uint64_t seed,
                        const std::filesystem::path& dir) {
  return write_synth(generate_synth(spec, sentences, seed), dir);
}

}  // namespace jst
