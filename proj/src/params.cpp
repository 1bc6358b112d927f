#include "jst/params.hpp"

#include <cstring>
#include <map>

#include "jst/rng.hpp"

namespace jst {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor ParamSet::add(const std::string& name, Tensor t) {
  for (const auto& e : entries_) {
    if (e.name == name) throw Error("duplicate parameter name '" + name + "'");
  }
  t.set_requires_grad(true);
  entries_.push_back({name, t});
  return t;
}

Tensor ParamSet::normal(const std::string& name, Shape shape, double std, std::mt19937_64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = std * standard_normal(rng);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor ParamSet::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw Error("no parameter named '" + name + "'");
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::uint64_t ParamSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries_) {
    h = fnv1a(e.name.data(), e.name.size(), h);
    for (auto d : e.tensor.shape()) {
      const std::uint64_t d64 = d;
      h = fnv1a(&d64, sizeof d64, h);
    }
    const auto data = e.tensor.data();
    h = fnv1a(data.data(), data.size() * sizeof(double), h);
  }
  return h;
}

std::vector<CheckpointEntry> ParamSet::to_entries(const std::string& prefix) const {
  std::vector<CheckpointEntry> out;
  for (const auto& e : entries_) {
    const auto data = e.tensor.data();
    out.push_back({prefix + e.name, e.tensor.shape(), {data.begin(), data.end()}});
  }
  return out;
}

void ParamSet::load_entries(const std::vector<CheckpointEntry>& entries, const std::string& prefix) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& e : entries_) {
    auto it = by_name.find(prefix + e.name);
    if (it == by_name.end()) throw Error("checkpoint lacks parameter '" + prefix + e.name + "'");
    if (it->second->shape != e.tensor.shape()) {
      throw ShapeError("checkpoint parameter '" + e.name + "' has shape " +
                       shape_str(it->second->shape) + ", model expects " +
                       shape_str(e.tensor.shape()));
    }
    auto dst = e.tensor.mutable_data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

}  // namespace jst
