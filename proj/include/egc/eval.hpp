#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "egc/dataset.hpp"
#include "egc/model.hpp"
#include "egc/random.hpp"
#include "egc/schedule.hpp"
#include "egc/tensor.hpp"

namespace egc {

struct AttackConfig {
  enum class Kind { fgsm, pgd };

  Kind kind = Kind::pgd;
  double epsilon = 0.1;     // L-infinity budget
  double step_size = 0.0;   // pgd; 0 selects 2.5 * epsilon / steps
  std::size_t steps = 20;   // pgd iterations

  static Kind parse_kind(const std::string& name);
  static std::string kind_name(Kind kind);
  double effective_step() const;
};

/// Fraction of argmax-correct predictions on clean inputs at timestep t.
double accuracy(const EGCModel& model, const Dataset& data, std::size_t t = 0);

/// x + epsilon * sign(grad_x CE(logits(x, 0), y)), clipped to [-1, 1].
Tensor fgsm(const EGCModel& model, const Tensor& x,
            const std::vector<std::size_t>& y, double epsilon);

/// Iterated signed-gradient ascent, re-projected after every step onto the
/// epsilon ball around x intersected with the data range.
Tensor pgd(const EGCModel& model, const Tensor& x,
           const std::vector<std::size_t>& y, const AttackConfig& cfg);

struct RobustnessRow {
  std::string model;
  std::string attack;
  double epsilon;
  double accuracy;
};

/// Accuracy under attack for every (model, attack, epsilon) combination.
/// `baseline` may be null.
std::vector<RobustnessRow> robustness_sweep(const EGCModel& model,
                                            const EGCModel* baseline,
                                            const Dataset& data,
                                            const std::vector<double>& epsilons,
                                            const AttackConfig& pgd_cfg);

/// Mean one-dimensional Wasserstein distance over random unit projections.
/// Point sets must have equal dimension and equal cardinality.
double sliced_wasserstein(const Tensor& a, const Tensor& b,
                          std::size_t projections, RandomEngine& rng);

/// Marginal log-density surrogate (logsumexp of the logits) averaged over a
/// clean batch, evaluated at sqrt(abar_t) x0 plus noise rescaled to a
/// per-coordinate mean magnitude k, for each k in `scales`.
/// Returns (k, value) pairs.
std::vector<std::pair<double, double>> energy_noise_profile(
    const EGCModel& model, const NoiseSchedule& ns, const Tensor& x0, std::size_t t,
    const std::vector<double>& scales, RandomEngine& rng);

struct DensityGrid {
  std::size_t resolution = 0;
  double extent = 0.0;                  // grid spans [-extent, extent]^2
  std::vector<double> values;           // row-major [b][a]
  double at(std::size_t ib, std::size_t ia) const;
};

/// Unnormalized log-density over x = sqrt(abar_t) x0 + a * e_u + b * e_v
/// for orthonormalized directions e_u, e_v (Gram-Schmidt applied).
DensityGrid density_grid_2d(const EGCModel& model, const NoiseSchedule& ns,
                            const Tensor& x0, std::size_t t, const Tensor& eps_u,
                            const Tensor& eps_v, std::size_t resolution,
                            double extent);

/// log of the trapezoid-rule integral of exp(log_density) over the box
/// [lo, hi]^2 at the given per-axis resolution (must be >= 8).
double grid_log_partition(const std::function<double(double, double)>& log_density,
                          double lo, double hi, std::size_t resolution);

/// Same, with the model's logsumexp-of-logits as the integrand (2-D inputs).
double grid_log_partition(const EGCModel& model, std::size_t t, double lo, double hi,
                          std::size_t resolution);

}  // namespace egc
