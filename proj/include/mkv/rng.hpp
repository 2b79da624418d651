#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mkv {

// Counter-based randomness. Every draw is a pure function of
// (seed, stream, i, j, k), so parallel scheduling cannot change results and
// any sub-computation can be replayed in isolation.
//
// Key derivation: stream ids are FNV-1a hashes of "module/purpose" strings;
// the five words are chained through the splitmix64 finalizer.
namespace rng {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xbf58476d1ce4e5b9ULL;
  z ^= z >> 27;
  z *= 0x94d049bb133111ebULL;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t key(std::uint64_t seed, std::uint64_t stream,
                            std::uint64_t i, std::uint64_t j,
                            std::uint64_t k) {
  std::uint64_t h = mix64(seed + kGamma);
  h = mix64(h ^ (stream + kGamma));
  h = mix64(h ^ (i + kGamma));
  h = mix64(h ^ (j + kGamma));
  h = mix64(h ^ (k + kGamma));
  return h;
}

// Uniform on the open interval (0,1); never returns 0 or 1.
inline double uniform_bits(std::uint64_t h) {
  return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace rng

// One logical random stream, e.g. Brownian increments of a simulation.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  RngStream() = default;
  RngStream(std::uint64_t seed_, std::string_view purpose)
      : seed(seed_), stream(rng::fnv1a(purpose)) {}

  double uniform(std::uint64_t i, std::uint64_t j = 0,
                 std::uint64_t k = 0) const {
    return rng::uniform_bits(rng::key(seed, stream, i, j, k));
  }

  // Standard normal via Box-Muller on components (2k, 2k+1).
  double normal(std::uint64_t i, std::uint64_t j = 0,
                std::uint64_t k = 0) const {
    double u1 = uniform(i, j, 2 * k);
    double u2 = uniform(i, j, 2 * k + 1);
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }
};

}  // namespace mkv
