#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace slf {

// Error taxonomy. The CLI maps these onto its stable exit codes:
// InputError -> 2, InsufficientDataError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Tensor shape / contract violations (programming or configuration errors).
struct ShapeError : Error {
  using Error::Error;
};
// Invalid arguments, malformed files, unknown ids.
struct InputError : Error {
  using Error::Error;
};
// Cohorts too small to define the requested quantity (no events, empty
// landmark set, ...).
struct InsufficientDataError : Error {
  using Error::Error;
};
// NaN/Inf in a forward pass, diverged training, degenerate weighting.
struct NumericError : Error {
  using Error::Error;
};

// Deterministic 64-bit generator (splitmix64). Used everywhere instead of
// <random> engines so that streams are reproducible independent of the
// standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0,1), 53-bit resolution.
  double unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform strictly inside (0,1); safe to feed into log().
  double unit_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // Standard normal via Box-Muller; the spare draw is cached, so the call
  // sequence is part of the stream contract.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = unit_open();
    const double u2 = unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Fisher-Yates index pick helper: integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent substream seed from a master seed and a stream id.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream) {
  Rng r(master ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  return r.next_u64();
}

inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t a,
                              std::uint64_t b) {
  return mix_seed(mix_seed(master, a), b);
}

// FNV-1a over a byte string; used for config provenance hashes.
inline std::uint64_t fnv1a_hash(const std::string& text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace slf
