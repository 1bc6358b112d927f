#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "jst/corpus.hpp"
#include "jst/masking.hpp"
#include "jst/sampler.hpp"
#include "jst/vocab.hpp"

using namespace jst;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("jst_unit_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CharVocab vocab_of(const std::string& text, std::size_t size = 16) {
  std::vector<std::pair<std::string, std::string>> corpus{{"xx", text}};
  return CharVocab::build(corpus, size);
}

}  // namespace

TEST_CASE("vocab build orders by frequency then code point") {
  auto v = vocab_of("aab", 8);
  CHECK(v.contains(U'a'));
  CHECK(v.contains(U'b'));
  CHECK(v.id_of(U'a') < v.id_of(U'b'));
  CHECK(vocab_of("zzzz").used() == kNumReserved + 1);
  auto tie = vocab_of("cbacba");
  CHECK(tie.id_of(U'a') < tie.id_of(U'b'));
  CHECK(tie.id_of(U'b') < tie.id_of(U'c'));
  std::vector<std::pair<std::string, std::string>> empty;
  CHECK_THROWS_AS(CharVocab::build(empty, 8), Error);
  CHECK_THROWS_AS(CharVocab::build(std::vector<std::pair<std::string, std::string>>{{"a", "x"}}, 6), Error);
  CHECK(kDefaultVocabSize == 4096);
}

TEST_CASE("vocab encode and decode") {
  auto v = vocab_of("abcabcé");
  auto ids = v.encode("ab");
  CHECK(ids == std::vector<int>{v.id_of(U'a'), v.id_of(U'b')});
  CHECK(v.decode(ids) == "ab");
  CHECK(v.decode(std::vector<int>{kBlankId, kPadId, kMaskId}) == "");
  auto oov = v.encode("aQ");
  CHECK(oov[1] == kUnkId);
  CHECK(v.encode(std::string(600, 'a')).size() == 512);
  CHECK_THROWS_AS(v.decode(std::vector<int>{16}), Error);
  CHECK(v.decode(v.encode("éa")) == "éa");
  for (int id : v.encode("abcé?xyz")) {
    CHECK(id != kBlankId);
    CHECK(id != kPadId);
    CHECK(id != kMaskId);
    CHECK(id != kBosId);
    CHECK(id != kEosId);
  }
}

TEST_CASE("vocab round trip property and file format") {
  auto v = vocab_of("the quick brown fox jumps over the lazy dog", 40);
  std::mt19937_64 rng(5);
  std::u32string alphabet = utf8_decode("the quickbrownfxjmpsvlazydg");
  for (int trial = 0; trial < 50; ++trial) {
    std::u32string s;
    const auto n = uniform_index(rng, 30);
    for (std::size_t i = 0; i < n; ++i) s += alphabet[uniform_index(rng, alphabet.size())];
    CHECK(v.decode(v.encode(utf8_encode(s))) == utf8_encode(s));
  }
  // Higher count never gets a larger id.
  for (int a = kNumReserved; a + 1 < static_cast<int>(v.used()); ++a) CHECK(v.count_of(a) >= v.count_of(a + 1));

  auto dir = scratch_dir("vocab");
  v.save(dir / "vocab.tsv");
  auto w = CharVocab::load(dir / "vocab.tsv");
  CHECK(w.size() == v.size());
  CHECK(w.encode("lazy dog") == v.encode("lazy dog"));
  std::ifstream in(dir / "vocab.tsv");
  std::string first;
  std::getline(in, first);
  CHECK(first.rfind("0\t", 0) == 0);
}

TEST_CASE("manifest reader") {
  auto dir = scratch_dir("manifest");
  {
    std::ofstream(dir / "empty.tsv");
  }
  CHECK(load_text_manifest(dir / "empty.tsv").empty());
  {
    std::ofstream f(dir / "text.tsv");
    f << "t1\ten\thello\nt2\ten\tworld\nt3\tfr\tbonjour\n";
  }
  auto text = load_text_manifest(dir / "text.tsv");
  REQUIRE(text.size() == 3);
  CHECK(text[0].id == "t1");
  CHECK(text[2].text == "bonjour");
  {
    std::ofstream f(dir / "bad.tsv");
    f << "t1\ten\thello\nt2\ten\n";
  }
  try {
    load_text_manifest(dir / "bad.tsv");
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  {
    std::ofstream f(dir / "speech.tsv");
    f << "s1\ten\tmissing.jstf\n";
  }
  CHECK_THROWS_AS(load_speech_manifest(dir / "speech.tsv"), Error);
}

TEST_CASE("synthetic rendering") {
  SynthSpec spec;
  spec.noise_std = 0.0;
  spec.frames_per_char = 4;
  std::mt19937_64 rng(1);
  auto inv = synth_inventory(spec, "l0");
  auto one = render_speech(spec, inv.substr(0, 1), rng);
  CHECK(one.count == 4);
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t d = 0; d < one.dim; ++d) CHECK(one.frame(i)[d] == one.frame(0)[d]);

  auto s = render_speech(spec, inv.substr(0, 5), rng);
  CHECK(s.count == 20);
  auto a = render_speech(spec, inv.substr(1, 3), rng);
  auto b = render_speech(spec, inv.substr(1, 3), rng);
  auto c = render_speech(spec, inv.substr(2, 3), rng);
  CHECK(a == b);
  CHECK(!(a == c));

  SynthSpec disjoint;
  disjoint.script_map = {{"l0", "latin"}, {"l1", "greek"}, {"l2", "latin"}};
  auto i0 = synth_inventory(disjoint, "l0");
  auto i1 = synth_inventory(disjoint, "l1");
  for (char32_t ch : i0) CHECK(i1.find(ch) == std::u32string::npos);
  CHECK(synth_inventory(disjoint, "l2") == i0);
  std::set<std::vector<double>> protos0, protos1;
  for (char32_t ch : i0) protos0.insert(char_prototype(disjoint, ch));
  for (char32_t ch : i1) protos1.insert(char_prototype(disjoint, ch));
  for (const auto& p : protos1) CHECK(protos0.count(p) == 0);
}

TEST_CASE("gen_synth is deterministic and consistent") {
  SynthSpec spec;
  auto d1 = scratch_dir("synth1");
  auto d2 = scratch_dir("synth2");
  auto m1 = gen_synth(spec, 5, 42, d1);
  auto m2 = gen_synth(spec, 5, 42, d2);
  auto p1 = load_paired_manifest(m1.paired);
  auto p2 = load_paired_manifest(m2.paired);
  REQUIRE(p1.size() == spec.paired_per_language * spec.paired_languages.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].frames == p2[i].frames);
    CHECK(p1[i].frames.count == spec.frames_per_char * utf8_decode(p1[i].transcript).size());
  }
  auto s1 = load_speech_manifest(m1.speech);
  CHECK(s1.size() == 15);
  CHECK(load_text_manifest(m1.text).size() == 15);
}

TEST_CASE("language weights") {
  auto d = language_weights({{"A", 8}, {"B", 1}}, 3.0);
  CHECK(std::abs(d["A"] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(d["B"] - 1.0 / 3.0) < 1e-12);
  auto p = language_weights({{"A", 8}, {"B", 1}}, 1.0);
  CHECK(std::abs(p["A"] - 8.0 / 9.0) < 1e-12);
  auto u = language_weights({{"A", 5}, {"B", 5}, {"C", 5}}, 7.0);
  for (auto& [l, q] : u) CHECK(std::abs(q - 1.0 / 3.0) < 1e-12);
  CHECK_THROWS_AS(language_weights({}, 3.0), Error);

  std::map<std::string, std::size_t> counts{{"a", 100}, {"b", 20}, {"c", 3}};
  std::map<std::string, std::size_t> scaled{{"a", 700}, {"b", 140}, {"c", 21}};
  auto w = language_weights(counts, 3.0);
  auto ws = language_weights(scaled, 3.0);
  double total = 0;
  for (auto& [l, q] : w) {
    CHECK(std::abs(q - ws[l]) < 1e-12);
    total += q;
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(w["a"] < 100.0 / 123.0);
  CHECK(w["c"] > 3.0 / 123.0);
}

TEST_CASE("language stream") {
  std::vector<TextSentence> recs;
  for (int i = 0; i < 5; ++i) recs.push_back({"a" + std::to_string(i), "A", "x"});
  auto single = make_stream(recs, 3.0, 9);
  std::set<std::string> epoch;
  for (int i = 0; i < 5; ++i) epoch.insert(single->next().id);
  CHECK(epoch.size() == 5);

  for (int i = 0; i < 3; ++i) recs.push_back({"b" + std::to_string(i), "B", "y"});
  auto s1 = make_stream(recs, 3.0, 4);
  auto s2 = make_stream(recs, 3.0, 4);
  std::vector<std::string> first;
  for (int i = 0; i < 10000; ++i) {
    auto id = s1->next().id;
    CHECK(id == s2->next().id);
    if (i < 30) first.push_back(id);
  }
  s1->seek(0);
  for (int i = 0; i < 30; ++i) CHECK(s1->next().id == first[i]);

  LanguageDistribution dist{{"A", 2.0 / 3.0}, {"B", 1.0 / 3.0}};
  LanguageStream<TextSentence> s3(group_by_language(recs), dist, 17);
  int a = 0;
  for (int i = 0; i < 30000; ++i) a += s3.next().language == "A";
  CHECK(std::abs(a / 30000.0 - 2.0 / 3.0) < 0.01);

  std::map<std::string, std::vector<TextSentence>> missing{{"A", {recs[0]}}};
  CHECK_THROWS_AS(LanguageStream<TextSentence>(missing, dist, 1), Error);
}

TEST_CASE("compose batch") {
  SynthSpec spec;
  auto corpus = generate_synth(spec, 6, 3);
  std::vector<std::pair<std::string, std::string>> texts;
  for (auto& t : corpus.text) texts.emplace_back(t.language, t.text);
  auto vocab = CharVocab::build(texts, 128);
  std::vector<EncodedText> enc;
  for (auto& t : corpus.text) enc.push_back({t.id, t.language, vocab.encode(t.text)});
  auto sp = make_stream(corpus.speech, 3.0, 1);
  auto tx = make_stream(enc, 3.0, 2);
  auto pa = make_stream(corpus.paired, 3.0, 3);
  auto b = compose_batch(sp.get(), tx.get(), pa.get(), {8, 32, 1}, vocab);
  CHECK(b.speech.size() == 8);
  CHECK(b.text.size() == 32);
  CHECK(b.paired.size() == 1);
  CHECK(b.text_padding.size() == 32 * b.text_max);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t t = 0; t < b.text_max; ++t) CHECK((b.text_padding[i * b.text_max + t] != 0) == (t >= b.text_lengths[i]));

  auto only = compose_batch(sp.get(), nullptr, nullptr, {4, 0, 0}, vocab);
  CHECK(only.speech.size() == 4);
  CHECK(only.text.empty());
  CHECK(only.paired.empty());
  CHECK(kPaperBatchSizes.speech == 2048);
  CHECK(kPaperBatchSizes.text == 8192);
  CHECK(kPaperBatchSizes.paired == 256);
}

TEST_CASE("text span masking") {
  auto p400 = mask_text_spans(400, 20, 0.15, 1);
  CHECK(text_span_count(400, 20, 0.15) == 3);
  CHECK(p400.size() == 60);
  auto p100 = mask_text_spans(100, 20, 0.15, 1);
  CHECK(p100.size() == 20);
  auto p10 = mask_text_spans(10, 20, 0.15, 1);
  CHECK(p10.size() == 10);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto p = mask_text_spans(57, 5, 0.3, seed);
    CHECK(std::is_sorted(p.positions.begin(), p.positions.end()));
    CHECK(std::adjacent_find(p.positions.begin(), p.positions.end()) == p.positions.end());
    CHECK(p.size() == 3 * 5);
    CHECK(p.positions.back() < 57);
  }
  CHECK(mask_text_spans(57, 5, 0.3, 8).positions == mask_text_spans(57, 5, 0.3, 8).positions);

  std::vector<std::uint8_t> pad(30, 0);
  for (std::size_t i = 12; i < 30; ++i) pad[i] = 1;
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (auto pos : mask_text_spans(pad, 3, 0.5, seed).positions) CHECK(pos < 12);
}

TEST_CASE("speech frame masking") {
  CHECK(mask_speech_frames(50, 0.0, 10, 1).empty());
  CHECK(mask_speech_frames(50, 1.0, 50, 1).size() == 50);
  double total = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) total += mask_speech_frames(1000, 0.065, 10, seed).size() / 1000.0;
  const double expected = 1.0 - std::pow(1.0 - 0.065, 10);
  CHECK(std::abs(total / 200 - expected) < 0.03);

  std::vector<std::uint8_t> pad(40, 0);
  for (std::size_t i = 25; i < 40; ++i) pad[i] = 1;
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (auto pos : mask_speech_frames(pad, 0.3, 4, seed).positions) CHECK(pos < 25);
}
