#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace jst {

// Reserved ids shared by text MLM, TLM and CTC.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kBlankId = 3;
inline constexpr int kBosId = 4;
inline constexpr int kEosId = 5;
inline constexpr std::size_t kNumReserved = 6;

inline constexpr std::size_t kDefaultVocabSize = 4096;
inline constexpr std::size_t kDefaultTextCap = 512;

std::u32string utf8_decode(std::string_view s);
std::string utf8_encode(std::u32string_view s);
std::string utf8_encode(char32_t c);

/// Character vocabulary. Immutable once built.
class CharVocab {
 public:
  CharVocab() = default;

  /// Most frequent characters fill the non-reserved slots; ties go to the
  /// lower code point.
  static CharVocab build(std::span<const std::pair<std::string, std::string>> corpus,
                         std::size_t size = kDefaultVocabSize);

  std::vector<int> encode(std::string_view text, std::size_t cap = kDefaultTextCap) const;
  /// Reserved and unassigned ids render as nothing.
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return size_; }
  /// Reserved slots plus assigned characters.
  std::size_t used() const { return kNumReserved + chars_.size(); }
  int id_of(char32_t c) const;
  bool contains(char32_t c) const { return char_to_id_.count(c) != 0; }
  char32_t char_of(int id) const;
  std::uint64_t count_of(int id) const;

  void save(const std::filesystem::path& path) const;
  static CharVocab load(const std::filesystem::path& path);

 private:
  std::size_t size_ = 0;
  std::vector<char32_t> chars_;  // id - kNumReserved -> character
  std::vector<std::uint64_t> counts_;
  std::unordered_map<char32_t, int> char_to_id_;
};

}  // namespace jst
