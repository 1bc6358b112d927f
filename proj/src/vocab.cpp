#include "jst/vocab.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "jst/tensor.hpp"

namespace jst {

namespace {

constexpr char32_t kReplacement = 0xFFFD;
constexpr std::array<const char*, kNumReserved> kReservedNames = {"<pad>", "<unk>", "<mask>",
                                                                  "<blank>", "<bos>", "<eos>"};

}  // namespace

std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (c0 < 0x80) {
      len = 1;
      cp = c0;
    } else if ((c0 & 0xE0) == 0xC0) {
      len = 2;
      cp = c0 & 0x1F;
    } else if ((c0 & 0xF0) == 0xE0) {
      len = 3;
      cp = c0 & 0x0F;
    } else if ((c0 & 0xF8) == 0xF0) {
      len = 4;
      cp = c0 & 0x07;
    } else {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    if (i + len > s.size()) {
      out.push_back(kReplacement);
      break;
    }
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      const auto c = static_cast<unsigned char>(s[i + k]);
      if ((c & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (c & 0x3F);
    }
    if (!ok) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string utf8_encode(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out += static_cast<char>(c);
  } else if (c < 0x800) {
    out += static_cast<char>(0xC0 | (c >> 6));
    out += static_cast<char>(0x80 | (c & 0x3F));
  } else if (c < 0x10000) {
    out += static_cast<char>(0xE0 | (c >> 12));
    out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (c & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (c >> 18));
    out += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (c & 0x3F));
  }
  return out;
}

std::string utf8_encode(std::u32string_view s) {
  std::string out;
  for (char32_t c : s) out += utf8_encode(c);
  return out;
}

CharVocab CharVocab::build(std::span<const std::pair<std::string, std::string>> corpus,
                           std::size_t size) {
  if (size <= kNumReserved) {
    throw Error("vocabulary size must exceed the " + std::to_string(kNumReserved) +
                " reserved tokens");
  }
  std::map<char32_t, std::uint64_t> freq;
  for (const auto& [lang, text] : corpus) {
    for (char32_t c : utf8_decode(text)) ++freq[c];
  }
  if (freq.empty()) throw Error("cannot build a vocabulary from an empty corpus");

  std::vector<std::pair<char32_t, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  CharVocab v;
  v.size_ = size;
  const std::size_t slots = std::min(ranked.size(), size - kNumReserved);
  for (std::size_t i = 0; i < slots; ++i) {
    v.chars_.push_back(ranked[i].first);
    v.counts_.push_back(ranked[i].second);
    v.char_to_id_[ranked[i].first] = static_cast<int>(kNumReserved + i);
  }
  return v;
}

int CharVocab::id_of(char32_t c) const {
  auto it = char_to_id_.find(c);
  return it == char_to_id_.end() ? kUnkId : it->second;
}

char32_t CharVocab::char_of(int id) const {
  if (id < static_cast<int>(kNumReserved)) return 0;
  const auto k = static_cast<std::size_t>(id) - kNumReserved;
  return k < chars_.size() ? chars_[k] : 0;
}

std::uint64_t CharVocab::count_of(int id) const {
  if (id < static_cast<int>(kNumReserved)) return 0;
  const auto k = static_cast<std::size_t>(id) - kNumReserved;
  return k < counts_.size() ? counts_[k] : 0;
}

std::vector<int> CharVocab::encode(std::string_view text, std::size_t cap) const {
  std::vector<int> ids;
  for (char32_t c : utf8_decode(text)) {
    if (ids.size() >= cap) break;
    ids.push_back(id_of(c));
  }
  return ids;
}

std::string CharVocab::decode(std::span<const int> ids) const {
  std::u32string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= size_) {
      throw Error("token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(size_));
    }
    const char32_t c = char_of(id);
    if (c != 0) out.push_back(c);
  }
  return utf8_encode(out);
}

void CharVocab::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write vocabulary file: " + path.string());
  for (std::size_t id = 0; id < size_; ++id) {
    f << id << '\t';
    if (id < kNumReserved) {
      f << kReservedNames[id] << '\t' << 0;
    } else if (id - kNumReserved < chars_.size()) {
      char hex[16];
      std::snprintf(hex, sizeof(hex), "U+%04X", static_cast<unsigned>(chars_[id - kNumReserved]));
      f << hex << '\t' << counts_[id - kNumReserved];
    } else {
      f << '-' << '\t' << 0;
    }
    f << '\n';
  }
}

CharVocab CharVocab::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read vocabulary file: " + path.string());
  CharVocab v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::istringstream is(line);
    std::string id_s, ch, count_s;
    if (!std::getline(is, id_s, '\t') || !std::getline(is, ch, '\t') || !std::getline(is, count_s)) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": expected id<TAB>char<TAB>count");
    }
    const auto id = std::stoul(id_s);
    if (id != line_no - 1) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": ids must be dense and ordered");
    }
    if (id < kNumReserved) {
      if (ch != kReservedNames[id]) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": reserved slot mismatch");
      }
    } else if (ch != "-") {
      if (ch.rfind("U+", 0) != 0) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": bad character field " + ch);
      }
      if (v.chars_.size() != id - kNumReserved) {
        throw Error(path.string() + ":" + std::to_string(line_no) + ": assigned ids must be contiguous");
      }
      const auto cp = static_cast<char32_t>(std::stoul(ch.substr(2), nullptr, 16));
      v.chars_.push_back(cp);
      v.counts_.push_back(std::stoull(count_s));
      v.char_to_id_[cp] = static_cast<int>(id);
    }
    v.size_ = id + 1;
  }
  if (v.size_ <= kNumReserved) throw Error("vocabulary file has no entries beyond reserved: " + path.string());
  return v;
}

}  // namespace jst
