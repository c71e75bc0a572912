#pragma once

// Little-endian binary checkpoint:
//   "FMCV" | u32 version | u32 config length | config JSON bytes | u32 tensor count
//   per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f32 payload
//   u64 FNV-1a checksum over all payload bytes

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fmcvrp/error.hpp"
#include "fmcvrp/tensor.hpp"

namespace fmcvrp::tensor {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'F', 'M', 'C', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct CheckpointData {
  std::string config_json;
  std::vector<NamedTensor> tensors;
};

namespace detail {
template <class U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}
template <class U>
U get(std::ifstream& in, const std::string& path) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) throw io_error("checkpoint truncated: " + path);
  return v;
}
}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config_json.size()));
  out.write(ck.config_json.data(), static_cast<std::streamsize>(ck.config_json.size()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t sum = 0xcbf29ce484222325ULL;
  for (const auto& t : ck.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) detail::put<std::uint64_t>(out, d);
    const std::size_t bytes = t.value.size() * sizeof(float);
    out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(bytes));
    sum = fnv1a64(t.value.data(), bytes, sum);
  }
  detail::put<std::uint64_t>(out, sum);
  if (!out) throw io_error("failed writing checkpoint " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw io_error("not a checkpoint: " + path);
  const auto version = detail::get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw io_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                   std::to_string(kCheckpointVersion) + ")");
  CheckpointData ck;
  const auto cfg_len = detail::get<std::uint32_t>(in, path);
  ck.config_json.resize(cfg_len);
  if (!in.read(ck.config_json.data(), cfg_len)) throw io_error("checkpoint truncated: " + path);
  const auto count = detail::get<std::uint32_t>(in, path);
  std::uint64_t sum = 0xcbf29ce484222325ULL;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = detail::get<std::uint32_t>(in, path);
    if (name_len > (1u << 16)) throw io_error("checkpoint corrupt (name length): " + path);
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len)) throw io_error("checkpoint truncated: " + path);
    const auto rank = detail::get<std::uint32_t>(in, path);
    if (rank > 8) throw io_error("checkpoint corrupt (rank): " + path);
    Shape shape;
    std::uint64_t elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(in, path)));
      elems *= shape.back();
    }
    if (elems > (1ULL << 32)) throw io_error("checkpoint corrupt (size): " + path);
    t.value = Tensor<float>(shape);
    const std::size_t bytes = t.value.size() * sizeof(float);
    if (!in.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(bytes)))
      throw io_error("checkpoint truncated (checksum cannot be verified): " + path);
    sum = fnv1a64(t.value.data(), bytes, sum);
    ck.tensors.push_back(std::move(t));
  }
  std::uint64_t stored = 0;
  if (!in.read(reinterpret_cast<char*>(&stored), sizeof stored))
    throw io_error("checkpoint truncated (checksum missing): " + path);
  if (stored != sum) throw io_error("checkpoint checksum mismatch: " + path);
  return ck;
}

}  // namespace fmcvrp::tensor
