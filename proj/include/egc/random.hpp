#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "egc/tensor.hpp"

namespace egc {

/// Deterministic random source. Gaussian draws use Box-Muller with no
/// cached spare so the consumed-word count per call is fixed, and integer
/// draws use rejection sampling; both are reproducible across platforms
/// for a given seed. State round-trips exactly through serialize().
class RandomEngine {
 public:
  explicit RandomEngine(std::uint64_t seed);

  /// Independent stream derived from (seed, stream index).
  static RandomEngine from_stream(std::uint64_t seed, std::uint64_t stream);

  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal
  std::uint64_t uniform_int(std::uint64_t n);  // [0, n), unbiased

  Tensor normal_tensor(Shape shape);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  std::string serialize() const;
  static RandomEngine deserialize(const std::string& state);

 private:
  RandomEngine() = default;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace egc
