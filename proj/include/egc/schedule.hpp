#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "egc/tensor.hpp"

namespace egc {

/// Precomputed variance schedule of the Gaussian noising chain
///   q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I).
/// Vectors are indexed by t-1 for t in [1, T]; alpha_bar(0) is defined as 1
/// so the t=1 posterior variance is exactly zero.
struct NoiseSchedule {
  enum class Kind { linear, cosine };

  Kind kind = Kind::linear;
  std::size_t T = 0;
  std::vector<double> beta;        // beta_t
  std::vector<double> alpha;       // 1 - beta_t
  std::vector<double> alpha_bar;   // prod_{s<=t} alpha_s
  std::vector<double> beta_tilde;  // posterior variance

  static NoiseSchedule linear(std::size_t T);
  static NoiseSchedule cosine(std::size_t T);
  static NoiseSchedule make(Kind kind, std::size_t T);
  /// Rebuild the derived sequences from a raw beta vector (checkpoint load).
  static NoiseSchedule from_beta(Kind kind, std::vector<double> beta);

  double beta_t(std::size_t t) const;
  double alpha_t(std::size_t t) const;
  double alpha_bar_t(std::size_t t) const;   // t = 0 -> 1.0
  double beta_tilde_t(std::size_t t) const;  // t = 1 -> 0.0

  static Kind parse_kind(const std::string& name);
  static std::string kind_name(Kind kind);
};

/// Draw from the closed-form marginal: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
/// t = 0 is the identity on x0.
Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, std::size_t t,
                const Tensor& eps);

/// Score of the noising kernel at x_t: -eps / sqrt(1 - abar_t).
Tensor score_target(const NoiseSchedule& ns, const Tensor& eps, std::size_t t);

struct PosteriorParams {
  Tensor mean;
  double var;
};

/// Gaussian posterior of x_{t-1} given (x_t, x0).
PosteriorParams posterior_params(const NoiseSchedule& ns, const Tensor& x0,
                                 const Tensor& xt, std::size_t t);

/// Posterior-mean recovery of x0 from x_t and a score estimate:
/// (x_t + (1-abar_t) * score) / sqrt(abar_t).
Tensor tweedie_x0(const NoiseSchedule& ns, const Tensor& xt, const Tensor& score,
                  std::size_t t);

}  // namespace egc
