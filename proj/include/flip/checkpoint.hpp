#pragma once

// Checkpoint container:
//   magic "FLIPCKPT" | u32 version | u64 tensor count
//   per tensor: u64 name length | name | u64 rank | u64 dims[rank] | u64 offset | u64 length
//   data section of little-endian f32 values; offsets are in bytes from its start.
// The run configuration is written next to it as "<path>.cfg" (key = value text).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "flip/config.hpp"
#include "flip/error.hpp"
#include "flip/model.hpp"

namespace flip {

inline constexpr char kCheckpointMagic[8] = {'F', 'L', 'I', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> values;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw Error("bad-checkpoint", "truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace detail

inline void write_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot write " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, tensors.size());
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    detail::put_le<std::uint64_t>(os, t.name.size());
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint64_t>(os, t.shape.size());
    for (auto d : t.shape) detail::put_le<std::uint64_t>(os, d);
    detail::put_le<std::uint64_t>(os, offset);
    detail::put_le<std::uint64_t>(os, t.values.size());
    offset += t.values.size() * 4;
  }
  for (const auto& t : tensors)
    for (float f : t.values) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw Error("io", "failed writing " + path);
}

inline std::vector<NamedTensor> read_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw Error("bad-checkpoint", path + " is not a checkpoint");
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) throw Error("bad-checkpoint", "unsupported version");
  const auto count = detail::get_le<std::uint64_t>(is);
  std::vector<NamedTensor> out(count);
  std::vector<std::uint64_t> offsets(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint64_t>(is);
    if (len > 4096) throw Error("bad-checkpoint", "tensor name too long");
    out[i].name.resize(len);
    if (!is.read(out[i].name.data(), static_cast<std::streamsize>(len))) throw Error("bad-checkpoint", "truncated name");
    const auto rank = detail::get_le<std::uint64_t>(is);
    if (rank > 8) throw Error("bad-checkpoint", "rank too large");
    std::uint64_t elems = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      out[i].shape.push_back(detail::get_le<std::uint64_t>(is));
      elems *= out[i].shape.back();
    }
    offsets[i] = detail::get_le<std::uint64_t>(is);
    const auto length = detail::get_le<std::uint64_t>(is);
    if (length != elems) throw Error("bad-checkpoint", "length does not match shape for " + out[i].name);
    out[i].values.resize(length);
  }
  const auto data_start = is.tellg();
  for (std::uint64_t i = 0; i < count; ++i) {
    is.seekg(data_start + static_cast<std::streamoff>(offsets[i]));
    for (auto& f : out[i].values) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
  }
  return out;
}

template <class T>
std::vector<NamedTensor> to_named_tensors(const Parameters<T>& p) {
  std::vector<NamedTensor> out;
  for_each_tensor(p, [&](const std::string& name, const Mat<T>& m) {
    NamedTensor t{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
    t.values.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) t.values.push_back(static_cast<float>(m.data()[i]));
    out.push_back(std::move(t));
  });
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const Parameters<T>& p, const RunConfig& cfg) {
  write_tensors(path, to_named_tensors(p));
  std::ofstream os(path + ".cfg");
  if (!os) throw Error("io", "cannot write " + path + ".cfg");
  cfg.write(os);
}

struct LoadedModel {
  RunConfig config;
  ModelConfig model;
  Parameters<float> params;
};

/// Reads "<path>.cfg" for the architecture, then fills every tensor by name.
inline LoadedModel load_checkpoint(const std::string& path) {
  LoadedModel lm;
  lm.config.load_file(path + ".cfg");
  lm.model = lm.config.model();
  Rng rng(0);
  lm.params = init_params<float>(lm.model, rng);
  std::unordered_map<std::string, NamedTensor> by_name;
  for (auto& t : read_tensors(path)) by_name.emplace(t.name, std::move(t));
  for_each_tensor(lm.params, [&](const std::string& name, Mat<float>& m) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("bad-checkpoint", "missing tensor " + name);
    const auto& t = it->second;
    if (t.shape.size() != 2 || t.shape[0] != static_cast<std::uint64_t>(m.rows()) ||
        t.shape[1] != static_cast<std::uint64_t>(m.cols()))
      throw Error("bad-checkpoint", "shape mismatch for " + name);
    std::copy(t.values.begin(), t.values.end(), m.data());
    by_name.erase(it);
  });
  if (!by_name.empty()) throw Error("bad-checkpoint", "unexpected tensor " + by_name.begin()->first);
  return lm;
}

}  // namespace flip
