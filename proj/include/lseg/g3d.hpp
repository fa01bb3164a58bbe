#pragma once

// ".g3d" volume files.
//
//   offset size  field
//   0      4     magic "G3DV"
//   4      4     u32 version (1)
//   8      12    u32 dims[3]
//   20     12    f32 spacing_mm[3]
//   32     12    f32 origin_mm[3]
//   44     1     u8 dtype (0 = f32 scalar, 1 = u8 label)
//   45     ...   payload, x-fastest
//
// Everything is little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "error.hpp"
#include "volgrid.hpp"

namespace lseg {

namespace io {

inline constexpr char kG3dMagic[4] = {'G', '3', 'D', 'V'};
inline constexpr std::uint32_t kG3dVersion = 1;
inline constexpr std::size_t kG3dHeaderSize = 45;

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

/// Append-only little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    v = byteswap_if_big(v);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

/// Bounds-checked little-endian reader; over-reads raise FormatErrc::truncated.
class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string where) : b_(b), where_(std::move(where)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(v);
  }
  void get_raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::string& where() const { return where_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError(FormatErrc::truncated, where_);
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
  std::string where_;
};

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrc::io, "cannot create " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrc::io, "write failed for " + path);
}

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, LabelId>, "g3d stores f32 or u8");
  return std::is_same_v<T, float> ? DType::f32 : DType::u8;
}

template <typename T>
std::vector<unsigned char> encode_g3d(const Grid<T>& g) {
  ByteWriter w;
  w.put_raw(kG3dMagic, 4);
  w.put<std::uint32_t>(kG3dVersion);
  const auto& geo = g.geometry();
  for (int d : geo.dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (float s : geo.spacing_mm) w.put<float>(s);
  for (float o : geo.origin_mm) w.put<float>(o);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    w.put_raw(g.values().data(), g.values().size() * sizeof(T));
  } else {
    for (T v : g.values()) w.put<T>(v);
  }
  return w.bytes();
}

using AnyGrid = std::variant<VoxelGrid, LabelGrid>;

inline AnyGrid decode_g3d(const std::vector<unsigned char>& bytes, const std::string& where) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kG3dMagic, 4) != 0) {
    if (bytes.size() < 4) throw FormatError(FormatErrc::truncated, where);
    throw FormatError(FormatErrc::bad_magic, where);
  }
  ByteReader r(bytes, where);
  char magic[4];
  r.get_raw(magic, 4);
  if (r.get<std::uint32_t>() != kG3dVersion) throw FormatError(FormatErrc::bad_version, where);
  GridGeometry geo;
  for (auto& d : geo.dims) {
    const auto v = r.get<std::uint32_t>();
    if (v == 0 || v > (1u << 16)) throw FormatError(FormatErrc::size_mismatch, where + " (dims)");
    d = static_cast<int>(v);
  }
  for (auto& s : geo.spacing_mm) s = r.get<float>();
  for (auto& o : geo.origin_mm) o = r.get<float>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype > 1) throw FormatError(FormatErrc::bad_dtype, where);
  try {
    geo.validate();
  } catch (const GeometryError&) {
    throw FormatError(FormatErrc::size_mismatch, where + " (spacing)");
  }
  const std::size_t n = geo.voxel_count();
  const std::size_t elem = dtype == 0 ? sizeof(float) : 1;
  if (r.remaining() < n * elem) throw FormatError(FormatErrc::truncated, where);
  if (r.remaining() > n * elem) throw FormatError(FormatErrc::size_mismatch, where);
  if (dtype == 0) {
    std::vector<float> v(n);
    for (auto& x : v) x = r.get<float>();
    return VoxelGrid(geo, std::move(v));
  }
  std::vector<LabelId> v(n);
  r.get_raw(v.data(), n);
  return LabelGrid(geo, std::move(v));
}

}  // namespace io

template <typename T>
void write_volume(const std::string& path, const Grid<T>& g) {
  io::write_file_bytes(path, io::encode_g3d(g));
}

inline io::AnyGrid read_volume(const std::string& path) {
  return io::decode_g3d(io::read_file_bytes(path), path);
}

/// Typed read; a file holding the other dtype raises FormatErrc::bad_dtype.
template <typename T>
Grid<T> read_volume_as(const std::string& path) {
  auto any = read_volume(path);
  if (auto* g = std::get_if<Grid<T>>(&any)) return std::move(*g);
  throw FormatError(FormatErrc::bad_dtype, path + " (unexpected dtype)");
}

inline VoxelGrid read_voxel_grid(const std::string& path) { return read_volume_as<float>(path); }
inline LabelGrid read_label_grid(const std::string& path) { return read_volume_as<LabelId>(path); }

}  // namespace lseg
