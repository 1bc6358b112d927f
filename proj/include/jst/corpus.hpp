#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace jst {

/// Row-major frames, `count` x `dim`.
struct FrameSeq {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  const double* frame(std::size_t i) const { return values.data() + i * dim; }
  bool operator==(const FrameSeq&) const = default;
};

struct SpeechUtterance {
  std::string id;
  std::string language;
  FrameSeq frames;
};

struct TextSentence {
  std::string id;
  std::string language;
  std::string text;
};

struct PairedExample {
  std::string id;
  std::string language;
  FrameSeq frames;
  std::string transcript;
};

enum class RecordKind { kSpeech, kText, kPaired };
using Record = std::variant<SpeechUtterance, TextSentence, PairedExample>;

RecordKind parse_record_kind(const std::string& name);

// Feature file: magic "JSTF", u32 frame count, u32 frame dim (little-endian),
// then f32 frames row-major.
void write_features(const std::filesystem::path& path, const FrameSeq& frames);
FrameSeq read_features(const std::filesystem::path& path);

/// Lazily streams records from a tab-separated manifest:
///   speech: id, language, feature path
///   text:   id, language, text
///   paired: id, language, feature path, transcript
/// Relative feature paths resolve against the manifest's directory.
class ManifestReader {
 public:
  ManifestReader(const std::filesystem::path& path, RecordKind kind);
  std::optional<Record> next();
  std::size_t line_number() const { return line_no_; }

 private:
  std::filesystem::path path_;
  std::filesystem::path base_dir_;
  RecordKind kind_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

std::vector<SpeechUtterance> load_speech_manifest(const std::filesystem::path& path);
std::vector<TextSentence> load_text_manifest(const std::filesystem::path& path);
std::vector<PairedExample> load_paired_manifest(const std::filesystem::path& path);

/// Parameters of the synthetic rendered-character corpus.
struct SynthSpec {
  std::vector<std::string> languages{"l0", "l1", "l2"};
  std::size_t chars_per_language = 16;
  std::size_t frames_per_char = 8;
  std::size_t frame_dim = 16;
  double noise_std = 0.05;
  /// language -> script name. Languages sharing a script share one
  /// character inventory; distinct scripts get disjoint inventories.
  /// Empty means every language uses a single shared script.
  std::map<std::string, std::string> script_map;
  /// Languages that receive paired speech+transcript data.
  std::vector<std::string> paired_languages{"l0", "l1"};
  std::size_t paired_per_language = 64;
  std::size_t min_chars = 6;
  std::size_t max_chars = 10;
  /// Seeds the frozen per-character prototype vectors.
  std::uint64_t prototype_seed = 7;

  void validate() const;
};

struct SynthCorpus {
  std::vector<SpeechUtterance> speech;
  std::vector<TextSentence> text;
  std::vector<PairedExample> paired;
};

/// Character inventory of `language` under `spec`, in inventory order.
std::u32string synth_inventory(const SynthSpec& spec, const std::string& language);
/// Frozen prototype vector for a character.
std::vector<double> char_prototype(const SynthSpec& spec, char32_t c);
/// Renders text as frames_per_char noisy copies of each character prototype.
FrameSeq render_speech(const SynthSpec& spec, std::u32string_view text, std::mt19937_64& rng);
/// Draws a sentence from the language's unigram distribution (no character
/// immediately repeats). `exclude` characters are never drawn.
std::u32string sample_sentence(const SynthSpec& spec, const std::string& language,
                               std::mt19937_64& rng, std::u32string_view exclude = {});

/// `sentences` speech and text records per language, plus
/// `paired_per_language` paired records for each paired language.
SynthCorpus generate_synth(const SynthSpec& spec, std::size_t sentences, std::uint64_t seed);

struct ManifestPaths {
  std::filesystem::path speech;
  std::filesystem::path text;
  std::filesystem::path paired;
};

/// Writes the three manifests plus feature files under `dir`.
ManifestPaths write_synth(const SynthCorpus& corpus, const std::filesystem::path& dir);
ManifestPaths gen_synth(const SynthSpec& spec, std::size_t sentences, std::uint64_t seed,
                        const std::filesystem::path& dir);

}  // namespace jst
