#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egc/tensor.hpp"

namespace egc {

/// Labeled point or image collection, values scaled to [-1, 1].
struct Dataset {
  Tensor xs;                         // [n, ...]
  std::vector<std::size_t> labels;   // empty when unlabeled
  std::size_t num_classes = 0;

  std::size_t size() const { return xs.shape()[0]; }
  Shape sample_shape() const;
  bool labeled() const { return !labels.empty(); }

  Tensor batch(const std::vector<std::size_t>& indices) const;
  std::vector<std::size_t> batch_labels(
      const std::vector<std::size_t>& indices) const;
};

struct DatasetSpec {
  enum class Kind { two_moons, eight_gaussians, checkerboard, idx_images };

  Kind kind = Kind::two_moons;
  std::size_t size = 2000;
  double noise = 0.1;
  std::string images_path;  // idx_images only
  std::string labels_path;

  static Kind parse_kind(const std::string& name);
  static std::string kind_name(Kind kind);
};

Dataset gen_dataset(const DatasetSpec& spec, std::uint64_t seed);

/// Reader for the big-endian IDX image/label container. Pixels are
/// normalized to [-1, 1]; image and label counts must agree.
Dataset idx_load(const std::string& images_path, const std::string& labels_path);

// Canonical normalization constants for the synthetic 2-D sets: raw
// coordinates map to the emitted ones via (p - center) / scale.
inline constexpr double kTwoMoonsCenterX = 0.5;
inline constexpr double kTwoMoonsCenterY = 0.25;
inline constexpr double kTwoMoonsScale = 1.5;
inline constexpr double kEightGaussScale = 1.4;

/// Distance from a normalized-coordinate point to the noise-free
/// two-moons manifold, in normalized units.
double two_moons_manifold_distance(double x, double y);

/// Component means of the eight-Gaussians set, normalized coordinates.
std::vector<std::pair<double, double>> eight_gaussians_means();

}  // namespace egc
