#include "egc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "egc/random.hpp"

namespace egc {

Shape Dataset::sample_shape() const {
  const Shape& s = xs.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t n = size();
  const std::size_t row = xs.size() / std::max<std::size_t>(n, 1);
  std::vector<double> out(indices.size() * row);
  const auto& xv = xs.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) throw std::out_of_range("batch: index out of range");
    std::copy_n(xv.begin() + indices[i] * row, row, out.begin() + i * row);
  }
  Shape shape = xs.shape();
  shape[0] = indices.size();
  return Tensor::from_data(std::move(shape), std::move(out));
}

std::vector<std::size_t> Dataset::batch_labels(
    const std::vector<std::size_t>& indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= labels.size()) {
      throw std::out_of_range("batch_labels: index out of range");
    }
    out[i] = labels[indices[i]];
  }
  return out;
}

DatasetSpec::Kind DatasetSpec::parse_kind(const std::string& name) {
  if (name == "two_moons") return Kind::two_moons;
  if (name == "eight_gaussians") return Kind::eight_gaussians;
  if (name == "checkerboard") return Kind::checkerboard;
  if (name == "idx_images") return Kind::idx_images;
  throw std::invalid_argument("unknown dataset kind '" + name + "'");
}

std::string DatasetSpec::kind_name(Kind kind) {
  switch (kind) {
    case Kind::two_moons: return "two_moons";
    case Kind::eight_gaussians: return "eight_gaussians";
    case Kind::checkerboard: return "checkerboard";
    case Kind::idx_images: return "idx_images";
  }
  return "?";
}

namespace {

constexpr double kPi = 3.14159265358979323846;

Dataset make_two_moons(std::size_t n, double noise, RandomEngine& rng) {
  std::vector<double> xs(2 * n);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double a = rng.uniform(0.0, kPi);
    const double nx = rng.normal() * noise;
    const double ny = rng.normal() * noise;
    double x, y;
    if (label == 0) {  // upper half circle about the origin
      x = std::cos(a);
      y = std::sin(a);
    } else {  // lower half circle about (1, 0.5)
      x = 1.0 - std::cos(a);
      y = 0.5 - std::sin(a);
    }
    xs[2 * i] = (x + nx - kTwoMoonsCenterX) / kTwoMoonsScale;
    xs[2 * i + 1] = (y + ny - kTwoMoonsCenterY) / kTwoMoonsScale;
    labels[i] = label;
  }
  return Dataset{Tensor::from_data({n, 2}, std::move(xs)), std::move(labels), 2};
}

Dataset make_eight_gaussians(std::size_t n, double noise, RandomEngine& rng) {
  std::vector<double> xs(2 * n);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 8;
    const double a = 2.0 * kPi * static_cast<double>(label) / 8.0;
    const double x = std::cos(a) + rng.normal() * noise;
    const double y = std::sin(a) + rng.normal() * noise;
    xs[2 * i] = x / kEightGaussScale;
    xs[2 * i + 1] = y / kEightGaussScale;
    labels[i] = label;
  }
  return Dataset{Tensor::from_data({n, 2}, std::move(xs)), std::move(labels), 8};
}

Dataset make_checkerboard(std::size_t n, RandomEngine& rng) {
  std::vector<double> xs(2 * n);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const double y = rng.uniform(-1.0, 1.0);
    const auto cx = static_cast<long>(std::floor((x + 1.0) * 2.0));
    const auto cy = static_cast<long>(std::floor((y + 1.0) * 2.0));
    xs[2 * i] = x;
    xs[2 * i + 1] = y;
    labels[i] = static_cast<std::size_t>((cx + cy) & 1);
  }
  return Dataset{Tensor::from_data({n, 2}, std::move(xs)), std::move(labels), 2};
}

}  // namespace

Dataset gen_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == DatasetSpec::Kind::idx_images) {
    return idx_load(spec.images_path, spec.labels_path);
  }
  if (spec.size == 0) throw std::invalid_argument("gen_dataset: size must be positive");
  RandomEngine rng = RandomEngine::from_stream(seed, 0xDA7A);
  switch (spec.kind) {
    case DatasetSpec::Kind::two_moons:
      return make_two_moons(spec.size, spec.noise, rng);
    case DatasetSpec::Kind::eight_gaussians:
      return make_eight_gaussians(spec.size, spec.noise, rng);
    case DatasetSpec::Kind::checkerboard:
      return make_checkerboard(spec.size, rng);
    default:
      throw std::invalid_argument("gen_dataset: unsupported kind");
  }
}

// ---- IDX ---------------------------------------------------------------------

namespace {

std::uint32_t read_be_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) {
    throw std::runtime_error("idx: truncated file '" + path + "'");
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

Dataset idx_load(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot open '" + images_path + "'");
  const std::uint32_t magic_i = read_be_u32(fi, images_path);
  if (magic_i != 0x00000803u) {
    throw std::runtime_error("idx: bad magic in image file '" + images_path + "'");
  }
  const std::uint32_t n = read_be_u32(fi, images_path);
  const std::uint32_t h = read_be_u32(fi, images_path);
  const std::uint32_t w = read_be_u32(fi, images_path);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * h * w);
  fi.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(fi.gcount()) != pixels.size()) {
    throw std::runtime_error("idx: truncated file '" + images_path + "'");
  }

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot open '" + labels_path + "'");
  const std::uint32_t magic_l = read_be_u32(fl, labels_path);
  if (magic_l != 0x00000801u) {
    throw std::runtime_error("idx: bad magic in label file '" + labels_path + "'");
  }
  const std::uint32_t nl = read_be_u32(fl, labels_path);
  if (nl != n) {
    throw std::runtime_error("idx: image count " + std::to_string(n) +
                             " does not match label count " + std::to_string(nl));
  }
  std::vector<unsigned char> raw_labels(nl);
  fl.read(reinterpret_cast<char*>(raw_labels.data()),
          static_cast<std::streamsize>(raw_labels.size()));
  if (static_cast<std::size_t>(fl.gcount()) != raw_labels.size()) {
    throw std::runtime_error("idx: truncated file '" + labels_path + "'");
  }

  std::vector<double> xs(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    xs[i] = static_cast<double>(pixels[i]) / 127.5 - 1.0;
  }
  std::vector<std::size_t> labels(raw_labels.begin(), raw_labels.end());
  std::size_t classes = 0;
  for (auto l : labels) classes = std::max(classes, l + 1);
  return Dataset{Tensor::from_data({n, 1, h, w}, std::move(xs)), std::move(labels),
                 classes};
}

// ---- manifold geometry ---------------------------------------------------------

namespace {

// Distance to an arc of a unit circle spanning [a0, a1] (radians).
double arc_distance(double px, double py, double cx, double cy, double a0,
                    double a1) {
  const double vx = px - cx, vy = py - cy;
  double ang = std::atan2(vy, vx);
  if (ang < 0.0) ang += 2.0 * kPi;  // [0, 2pi)
  double clamped = std::clamp(ang, a0, a1);
  // also consider the endpoints across the wrap
  double best = 1e300;
  for (double a : {clamped, a0, a1}) {
    const double dx = px - (cx + std::cos(a));
    const double dy = py - (cy + std::sin(a));
    best = std::min(best, std::hypot(dx, dy));
  }
  return best;
}

}  // namespace

double two_moons_manifold_distance(double x, double y) {
  const double rx = x * kTwoMoonsScale + kTwoMoonsCenterX;
  const double ry = y * kTwoMoonsScale + kTwoMoonsCenterY;
  const double d0 = arc_distance(rx, ry, 0.0, 0.0, 0.0, kPi);
  const double d1 = arc_distance(rx, ry, 1.0, 0.5, kPi, 2.0 * kPi);
  return std::min(d0, d1) / kTwoMoonsScale;
}

std::vector<std::pair<double, double>> eight_gaussians_means() {
  std::vector<std::pair<double, double>> means;
  for (std::size_t k = 0; k < 8; ++k) {
    const double a = 2.0 * kPi * static_cast<double>(k) / 8.0;
    means.emplace_back(std::cos(a) / kEightGaussScale,
                       std::sin(a) / kEightGaussScale);
  }
  return means;
}

}  // namespace egc
