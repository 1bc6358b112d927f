#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "jst/checkpoint.hpp"
#include "jst/tensor.hpp"

namespace jst {

/// Named, ordered collection of trainable leaves. Registration order is the
/// checkpoint order and the optimizer order.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  Tensor add(const std::string& name, Tensor t);
  /// Normal(0, std) leaf drawn from `rng`.
  Tensor normal(const std::string& name, Shape shape, double std, std::mt19937_64& rng);
  Tensor constant(const std::string& name, Shape shape, double value);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  const Tensor& get(const std::string& name) const;
  std::size_t count() const;
  void zero_grad();

  /// FNV-1a over names, shapes and value bits.
  std::uint64_t hash() const;

  std::vector<CheckpointEntry> to_entries(const std::string& prefix = "") const;
  /// Copies values from matching "prefix + name" entries; every parameter must be present.
  void load_entries(const std::vector<CheckpointEntry>& entries, const std::string& prefix = "");

 private:
  std::vector<Entry> entries_;
};

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace jst
