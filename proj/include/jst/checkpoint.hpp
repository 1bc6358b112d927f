#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "jst/tensor.hpp"

namespace jst {

/// Checkpoint container layout (all integers little-endian):
///   magic "JSTCKPT\0" | u32 version
///   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 payload
/// The final entry is "__checksum__" (rank 1, one f64 whose bit pattern is the
/// FNV-1a hash of every preceding byte).
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

}  // namespace jst
