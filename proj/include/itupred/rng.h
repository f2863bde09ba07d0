#pragma once

#include <cstdint>
#include <random>

namespace itupred {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to expand one master seed into independent
// stream seeds without consuming the master stream.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for stream `index` derived from `master`. Stream i does not depend on
/// how many other streams exist.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master) ^ mix64(index + 0x51ed270b27e5a3c1ULL));
}

inline Rng make_rng(std::uint64_t master, std::uint64_t index) {
  return Rng(derive_seed(master, index));
}

}  // namespace itupred
