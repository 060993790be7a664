#pragma once

// Seed derivation so every generated artifact is a pure function of
// (base seed, stream id, index).

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mtdlab {

inline std::uint64_t SplitMix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t DeriveSeed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6A09E667F3BCC908ULL;
  for (std::uint64_t p : parts) h = SplitMix64(h ^ SplitMix64(p));
  return h;
}

inline std::mt19937_64 DeriveRng(std::initializer_list<std::uint64_t> parts) {
  return std::mt19937_64(DeriveSeed(parts));
}

}  // namespace mtdlab
