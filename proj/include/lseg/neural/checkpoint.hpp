#pragma once

// Parameter checkpoints (".lfnn"), little-endian:
//   "LFNN" | u32 version (1)
//   spec:  u8 kind | u32 in_channels | u32 out_classes | u32 dpn_filters
//          u32 unet_base_filters | u32 levels | f32 dropout_rate
//   meta:  u32 byte length | "key=value\n" lines
//   u64 parameter count | f32 parameters
//   u64 buffer count    | f32 buffers (batchnorm running mean/var)

#include <cstdint>
#include <cstring>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "../error.hpp"
#include "../g3d.hpp"
#include "network.hpp"

namespace lseg::nn {

inline constexpr char kCheckpointMagic[4] = {'L', 'F', 'N', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkSpec spec;
  std::map<std::string, std::string> meta;
  std::vector<float> params;
  std::vector<float> buffers;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, std::map<std::string, std::string> meta = {}) {
  Checkpoint c;
  c.spec = net.spec();
  c.meta = std::move(meta);
  c.params.assign(net.params().values.begin(), net.params().values.end());
  c.buffers.assign(net.params().buffers.begin(), net.params().buffers.end());
  return c;
}

/// Rebuilds a network and loads the stored parameters into it.
template <typename T>
Network<T> network_from_checkpoint(const Checkpoint& c) {
  Network<T> net(c.spec);
  if (net.params().values.size() != c.params.size() || net.params().buffers.size() != c.buffers.size())
    throw FormatError(FormatErrc::size_mismatch, "checkpoint parameter count does not match its spec");
  for (std::size_t i = 0; i < c.params.size(); ++i) net.params().values[i] = static_cast<T>(c.params[i]);
  for (std::size_t i = 0; i < c.buffers.size(); ++i) net.params().buffers[i] = static_cast<T>(c.buffers[i]);
  return net;
}

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.put_raw(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.spec.kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.in_channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.out_classes));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.dpn_filters));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.unet_base_filters));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.spec.levels));
  w.put<float>(static_cast<float>(c.spec.dropout_rate));
  std::string meta;
  for (const auto& [k, v] : c.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ArgumentError("checkpoint metadata keys/values must not contain '=' or newlines");
    meta += k + "=" + v + "\n";
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_raw(meta.data(), meta.size());
  w.put<std::uint64_t>(c.params.size());
  for (float p : c.params) w.put<float>(p);
  w.put<std::uint64_t>(c.buffers.size());
  for (float b : c.buffers) w.put<float>(b);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& where) {
  if (bytes.size() < 4) throw FormatError(FormatErrc::truncated, where);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError(FormatErrc::bad_magic, where);
  io::ByteReader r(bytes, where);
  char magic[4];
  r.get_raw(magic, 4);
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw FormatError(FormatErrc::bad_version, where);
  Checkpoint c;
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1) throw FormatError(FormatErrc::bad_dtype, where + " (architecture)");
  c.spec.kind = static_cast<Architecture>(kind);
  c.spec.in_channels = static_cast<int>(r.get<std::uint32_t>());
  c.spec.out_classes = static_cast<int>(r.get<std::uint32_t>());
  c.spec.dpn_filters = static_cast<int>(r.get<std::uint32_t>());
  c.spec.unet_base_filters = static_cast<int>(r.get<std::uint32_t>());
  c.spec.levels = static_cast<int>(r.get<std::uint32_t>());
  c.spec.dropout_rate = r.get<float>();
  try {
    c.spec.validate();
  } catch (const ArgumentError&) {
    throw FormatError(FormatErrc::size_mismatch, where + " (spec)");
  }
  const auto meta_len = r.get<std::uint32_t>();
  std::string meta(meta_len, '\0');
  r.get_raw(meta.data(), meta_len);
  std::istringstream ms(meta);
  for (std::string line; std::getline(ms, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(FormatErrc::size_mismatch, where + " (metadata)");
    c.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto np = r.get<std::uint64_t>();
  if (np > r.remaining() / sizeof(float)) throw FormatError(FormatErrc::truncated, where);
  c.params.resize(np);
  for (auto& p : c.params) p = r.get<float>();
  const auto nb = r.get<std::uint64_t>();
  if (nb > r.remaining() / sizeof(float)) throw FormatError(FormatErrc::truncated, where);
  c.buffers.resize(nb);
  for (auto& b : c.buffers) b = r.get<float>();
  if (r.remaining() != 0) throw FormatError(FormatErrc::size_mismatch, where + " (trailing bytes)");
  return c;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
  io::write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file_bytes(path), path);
}

}  // namespace lseg::nn
