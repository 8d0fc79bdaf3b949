#pragma once

// Binary model checkpoint.
//
//   magic      8 bytes  "FLAYCKPT"
//   version    u32      kCheckpointVersion
//   arch_id    u32 length + bytes
//   layers     u32 count, then per layer: u32 name length + bytes, u64 offset, u64 length
//   values     u64 count, then IEEE-754 binary64 values in layout order
//
// Integers and doubles are little-endian. Round-trip is bit-exact.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fedlayer/nn.hpp"

namespace fedlayer {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'L', 'A', 'Y', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw Error("checkpoint", "truncated checkpoint");
  return v;
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 20)) throw Error("checkpoint", "implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw Error("checkpoint", "truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Model& model) {
  const FlatVector flat = flatten(model);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put_string(os, flat.arch_id);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(flat.layout.size()));
  for (const auto& e : flat.layout) {
    detail::put_string(os, e.layer);
    detail::put<std::uint64_t>(os, e.offset);
    detail::put<std::uint64_t>(os, e.length);
  }
  detail::put<std::uint64_t>(os, flat.values.size());
  os.write(reinterpret_cast<const char*>(flat.values.data()),
           static_cast<std::streamsize>(flat.values.size() * sizeof(double)));
  if (!os) throw Error("checkpoint", "write failed");
}

inline Model read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw Error("checkpoint", "bad magic header");
  }
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint", "unsupported checkpoint version " + std::to_string(version));
  }
  FlatVector flat;
  flat.arch_id = detail::get_string(is);
  const auto nlayers = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < nlayers; ++i) {
    LayoutEntry e;
    e.layer = detail::get_string(is);
    e.offset = detail::get<std::uint64_t>(is);
    e.length = detail::get<std::uint64_t>(is);
    flat.layout.push_back(std::move(e));
  }
  const auto count = detail::get<std::uint64_t>(is);
  if (count > (std::uint64_t{1} << 32)) throw Error("checkpoint", "implausible parameter count");
  flat.values.resize(count);
  if (!is.read(reinterpret_cast<char*>(flat.values.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
    throw Error("checkpoint", "truncated parameter block");
  }
  Model m = unflatten(flat.arch_id, flat);
  if (layout_of(m) != flat.layout) throw Error("checkpoint", "stored layout does not match architecture");
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint", "cannot open '" + path + "' for writing");
  write_checkpoint(os, model);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint", "cannot open '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace fedlayer
