#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "littlebird/param_store.hpp"

namespace littlebird {

// ---------------------------------------------------------------------------
// Checkpoint format, version 1. Everything is little-endian regardless of
// host byte order; doubles travel as their IEEE-754 bit patterns, so a
// save/load round trip is bit-exact.
//
//   magic   "LBCP"
//   u32     version (1)
//   u32     meta length, then meta bytes (UTF-8, typically JSON)
//   u32     parameter count
//   per parameter:
//     u32   name length, name bytes
//     u32   rank, then rank x i64 dims
//     f64   data, row-major
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint truncated: " + path);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint truncated: " + path);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ParamStore& params, const std::string& meta, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write("LBCP", 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put_u32(os, static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& t = params.tensor(i);
    detail::put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (Index d : t.shape()) detail::put_u64(os, static_cast<uint64_t>(d));
    for (Index j = 0; j < t.size(); ++j) detail::put_u64(os, std::bit_cast<uint64_t>(t.array()[j]));
  }
  if (!os) throw IoError("failed while writing checkpoint: " + path);
}

/// Loads parameter values into an already-built store. Names, order, and
/// shapes must match the registered parameters exactly. Returns the stored
/// meta string.
inline std::string load_checkpoint(ParamStore& params, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LBCP", 4) != 0)
    throw IoError("not a checkpoint file: " + path);
  const uint32_t version = detail::get_u32(is, path);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const uint32_t meta_len = detail::get_u32(is, path);
  std::string meta(meta_len, '\0');
  if (meta_len && !is.read(meta.data(), meta_len)) throw IoError("checkpoint truncated: " + path);
  const uint32_t count = detail::get_u32(is, path);
  if (count != params.size())
    throw IoError("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                  std::to_string(params.size()) + ": " + path);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::get_u32(is, path);
    std::string name(name_len, '\0');
    if (name_len && !is.read(name.data(), name_len)) throw IoError("checkpoint truncated: " + path);
    if (name != params.name(i))
      throw IoError("checkpoint parameter '" + name + "' does not match model parameter '" +
                    params.name(i) + "': " + path);
    const uint32_t rank = detail::get_u32(is, path);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<Index>(detail::get_u64(is, path));
    Tensor& t = params.tensor(i);
    if (shape != t.shape())
      throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                    ", model expects " + shape_str(t.shape()) + ": " + path);
    for (Index j = 0; j < t.size(); ++j) t.array()[j] = std::bit_cast<double>(detail::get_u64(is, path));
  }
  return meta;
}

/// Reads only the meta string of a checkpoint.
inline std::string peek_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LBCP", 4) != 0)
    throw IoError("not a checkpoint file: " + path);
  const uint32_t version = detail::get_u32(is, path);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  const uint32_t meta_len = detail::get_u32(is, path);
  std::string meta(meta_len, '\0');
  if (meta_len && !is.read(meta.data(), meta_len)) throw IoError("checkpoint truncated: " + path);
  return meta;
}

}  // namespace littlebird
