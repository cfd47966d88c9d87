#pragma once

// Binary weight files: magic, entry count, then per entry the name, the
// NCHW shape and little-endian float32 values. Buffers (e.g. batch-norm
// running statistics) are stored like parameters.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sola/layers.hpp"

namespace sola {

inline constexpr char kWeightsMagic[8] = {'S', 'O', 'L', 'A', 'W', '0', '0', '1'};

struct WeightEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline void write_weight_entries(const std::string& path, const std::vector<WeightEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write weights to '" + path + "'");
  out.write(kWeightsMagic, sizeof kWeightsMagic);
  const auto count = static_cast<std::uint64_t>(entries.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& e : entries) {
    const auto len = static_cast<std::uint32_t>(e.name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(e.name.data(), len);
    const std::array<std::int32_t, 4> dims{e.shape.n, e.shape.c, e.shape.h, e.shape.w};
    out.write(reinterpret_cast<const char*>(dims.data()), sizeof dims);
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  if (!out) throw LoadError("failed while writing weights to '" + path + "'");
}

inline std::vector<WeightEntry> read_weight_entries(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open weights '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(magic, magic + 8, kWeightsMagic)) throw LoadError("'" + path + "' is not a weights file");
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::vector<WeightEntry> out;
  for (std::uint64_t k = 0; k < count && in; ++k) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (len > 4096) throw LoadError("'" + path + "': corrupt entry name length");
    WeightEntry e;
    e.name.resize(len);
    in.read(e.name.data(), len);
    std::array<std::int32_t, 4> dims{};
    in.read(reinterpret_cast<char*>(dims.data()), sizeof dims);
    for (int d : dims)
      if (d < 0 || d > (1 << 20)) throw LoadError("'" + path + "': corrupt shape for '" + e.name + "'");
    e.shape = {dims[0], dims[1], dims[2], dims[3]};
    e.values.resize(e.shape.numel());
    in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    out.push_back(std::move(e));
  }
  if (!in) throw LoadError("'" + path + "' is truncated");
  return out;
}

template <typename T>
void save_weights(const std::string& path, const ParamList<T>& params) {
  std::vector<WeightEntry> entries;
  for (const auto& p : params) {
    const auto& v = p.param->value;
    entries.push_back({p.name, v.shape(), std::vector<float>(v.vec().begin(), v.vec().end())});
  }
  write_weight_entries(path, entries);
}

/// Loads by name. Unknown, missing or mis-shaped entries are errors.
template <typename T>
void load_weights(const std::string& path, ParamList<T>& params) {
  std::map<std::string, WeightEntry> by_name;
  for (auto& e : read_weight_entries(path)) {
    const std::string name = e.name;
    if (!by_name.emplace(name, std::move(e)).second) throw LoadError("'" + path + "': duplicate entry '" + name + "'");
  }
  for (const auto& p : params)
    if (!by_name.count(p.name)) throw LoadError("'" + path + "': missing entry '" + p.name + "'");
  if (by_name.size() != params.size()) {
    for (const auto& [name, e] : by_name) {
      bool known = false;
      for (const auto& p : params) known = known || p.name == name;
      if (!known) throw LoadError("'" + path + "': unknown entry '" + name + "'");
    }
  }
  for (auto& p : params) {
    const WeightEntry& e = by_name.at(p.name);
    auto& v = p.param->value;
    if (!(e.shape == v.shape()))
      throw LoadError("'" + path + "': entry '" + p.name + "' has shape " + e.shape.str() + ", model expects " +
                      v.shape().str());
    for (std::size_t i = 0; i < e.values.size(); ++i) v[i] = static_cast<T>(e.values[i]);
  }
}

}  // namespace sola
