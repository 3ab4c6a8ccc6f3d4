#include "egc/random.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace egc {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

RandomEngine::RandomEngine(std::uint64_t seed) : engine_(seed) {}

RandomEngine RandomEngine::from_stream(std::uint64_t seed, std::uint64_t stream) {
  return RandomEngine(splitmix64(seed ^ splitmix64(stream + 1)));
}

double RandomEngine::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RandomEngine::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RandomEngine::normal() {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::uint64_t RandomEngine::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

Tensor RandomEngine::normal_tensor(Shape shape) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = normal();
  return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor RandomEngine::uniform_tensor(Shape shape, double lo, double hi) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::string RandomEngine::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

RandomEngine RandomEngine::deserialize(const std::string& state) {
  RandomEngine r;
  std::istringstream is(state);
  is >> r.engine_;
  if (is.fail()) throw std::runtime_error("RandomEngine: corrupt serialized state");
  return r;
}

}  // namespace egc
