#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lakit/errors.hpp"
#include "lakit/tensor.hpp"

// Portable tensor container ("LAKT").
//
//   header : 'L' 'A' 'K' 'T', u32 version
//   record : u32 name_length, name bytes, u32 rank, rank x u32 extents,
//            numel x f32 values
//
// All integers and floats little-endian. Records run until end of file.
namespace lakit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw DataError(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

template <class T>
void write_tensors(std::ostream& os, const std::vector<NamedTensor<T>>& tensors) {
  os.write("LAKT", 4);
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, detail::checked_u32(name.size(), "name length"));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, detail::checked_u32(t.rank(), "rank"));
    for (std::size_t e : t.shape()) detail::put_u32(os, detail::checked_u32(e, "extent"));
    for (T v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw DataError("checkpoint: write failed");
}

template <class T>
std::vector<NamedTensor<T>> read_tensors(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "LAKT", 4) != 0) throw DataError("checkpoint: bad magic");
  std::uint32_t version = 0;
  if (!detail::get_u32(is, version)) throw DataError("checkpoint: truncated header");
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  std::vector<NamedTensor<T>> out;
  std::uint32_t name_len = 0;
  while (detail::get_u32(is, name_len)) {
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !detail::get_u32(is, rank)) throw DataError("checkpoint: truncated record");
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint32_t v = 0;
      if (!detail::get_u32(is, v)) throw DataError("checkpoint: truncated extents in '" + name + "'");
      e = v;
    }
    std::vector<T> data(numel(shape));
    for (auto& v : data) {
      std::uint32_t bits = 0;
      if (!detail::get_u32(is, bits)) throw DataError("checkpoint: truncated values in '" + name + "'");
      v = static_cast<T>(std::bit_cast<float>(bits));
    }
    out.push_back({std::move(name), Tensor<T>(std::move(shape), std::move(data))});
  }
  if (!is.eof()) throw DataError("checkpoint: read error");
  if (is.gcount() != 0) throw DataError("checkpoint: trailing bytes");
  return out;
}

template <class T>
void save_tensors(const std::string& path, const std::vector<NamedTensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensors(os, tensors);
}

template <class T>
std::vector<NamedTensor<T>> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tensors<T>(is);
}

}  // namespace lakit
