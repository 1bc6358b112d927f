#include "jst/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace jst {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'J', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
constexpr const char* kChecksumName = "__checksum__";

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_entry(std::string& out, const CheckpointEntry& e) {
  if (shape_numel(e.shape) != e.values.size()) {
    throw ShapeError("checkpoint entry '" + e.name + "' has shape " + shape_str(e.shape) +
                     " but " + std::to_string(e.values.size()) + " values");
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
  out += e.name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
  for (auto d : e.shape) put<std::uint64_t>(out, d);
  for (double v : e.values) put<double>(out, v);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("checkpoint is truncated or corrupted");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& e : entries) put_entry(out, e);
  const std::uint64_t h = fnv1a(out);
  put_entry(out, {kChecksumName, {1}, {std::bit_cast<double>(h)}});

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open checkpoint for writing: " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("failed writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes);
  if (r.get_bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw Error("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  std::vector<CheckpointEntry> entries;
  bool verified = false;
  while (!r.done()) {
    const std::size_t entry_start = r.pos();
    CheckpointEntry e;
    const auto name_len = r.get<std::uint32_t>();
    e.name = r.get_bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 16) throw Error("checkpoint is corrupted (rank " + std::to_string(rank) + ")");
    for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(e.shape);
    if (n > (bytes.size() - r.pos()) / sizeof(double)) throw Error("checkpoint is truncated or corrupted");
    e.values.resize(n);
    for (auto& v : e.values) v = r.get<double>();
    if (e.name == kChecksumName) {
      const auto expected = fnv1a(bytes.substr(0, entry_start));
      if (e.values.size() != 1 || std::bit_cast<std::uint64_t>(e.values[0]) != expected) {
        throw Error("checkpoint checksum mismatch: " + path.string());
      }
      verified = true;
      if (!r.done()) throw Error("checkpoint has trailing bytes after checksum");
      break;
    }
    entries.push_back(std::move(e));
  }
  if (!verified) throw Error("checkpoint has no checksum entry (truncated?): " + path.string());
  return entries;
}

}  // namespace jst
