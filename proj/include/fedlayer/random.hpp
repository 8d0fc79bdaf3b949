#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedlayer {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; good avalanche for deriving independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive hash of a seed lineage, e.g. derive_seed({master, round, id}).
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

// Stream tags so that different consumers of one master seed never collide.
enum class Stream : std::uint64_t {
  kDataset = 1,
  kPartition,
  kSplit,
  kInit,
  kSampling,
  kLocalTrain,
  kAttack,
  kDefense,
  kRoot,
};

inline std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                 std::uint64_t a = 0, std::uint64_t b = 0) noexcept {
  return derive_seed({master, static_cast<std::uint64_t>(stream), a, b});
}

}  // namespace fedlayer
