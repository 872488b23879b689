#pragma once

#include <cstdint>
#include <random>

namespace osteo {

using Rng = std::mt19937_64;

/// Independent per-item stream seed from a run seed and an item index
/// (splitmix64 finaliser over the pair).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + stream + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(stream_seed(seed, stream));
}

}  // namespace osteo
