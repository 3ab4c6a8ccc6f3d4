#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "egc/model.hpp"
#include "egc/random.hpp"
#include "egc/schedule.hpp"
#include "egc/tensor.hpp"

namespace egc {

struct SampleConfig {
  enum class Sampler { ancestral, langevin };

  Sampler sampler = Sampler::ancestral;
  std::size_t num_samples = 1;
  std::optional<std::size_t> label;  // conditional sampling when set
  double guidance_scale = 1.0;
  double langevin_step = 1e-2;
  std::size_t langevin_steps = 1000;
  double divergence_bound = 1e4;
  std::uint64_t seed = 0;
  bool use_ema = true;

  static Sampler parse_sampler(const std::string& name);
  static std::string sampler_name(Sampler s);
};

/// Score estimate for a whole batch at one timestep. The input is a plain
/// value tensor; implementations take their own gradients if they need to.
using ScoreFn = std::function<Tensor(const Tensor& xt, std::size_t t)>;

/// One denoising transition:
///   x_{t-1} = (x_t + (1 - alpha_t) * score) / sqrt(alpha_t) + sqrt(beta_t) * eps
/// with the noise term dropped at t = 1.
Tensor ancestral_step(const NoiseSchedule& ns, const Tensor& xt, std::size_t t,
                      const Tensor& score, const Tensor& eps);

/// Full reverse chain from x at t = T down to t = 0. Throws naming the
/// offending timestep if the state leaves the finite range.
Tensor ancestral_chain(const NoiseSchedule& ns, const ScoreFn& score_fn, Tensor x,
                       RandomEngine& rng);

/// Model-driven score for the sampler: unconditional, or classifier-guided
/// when a label is set.
ScoreFn model_score_fn(const EGCModel& model, std::optional<std::size_t> label,
                       double guidance_scale);

/// Draw config.num_samples from pure noise with the ancestral sampler.
Tensor generate(const EGCModel& model, const NoiseSchedule& ns,
                const SampleConfig& config);

/// Unadjusted Langevin iteration x <- x + c * score(x) + sqrt(2c) * eps at a
/// fixed noise level; diagnostic use. Throws if |x| exceeds the bound.
Tensor langevin_sample(const ScoreFn& score_fn, std::size_t t, Tensor x, double c,
                       std::size_t steps, RandomEngine& rng,
                       double divergence_bound = 1e4);

/// Spherical interpolation between two flattened tensors; falls back to
/// linear interpolation for (near-)zero or (near-)collinear inputs.
Tensor slerp(const Tensor& a, const Tensor& b, double lambda);

/// Interpolate two noise seeds, then run a deterministic reverse chain.
/// lambda = 0 or 1 reproduces the corresponding endpoint generation exactly.
Tensor interpolate(const EGCModel& model, const NoiseSchedule& ns,
                   const Tensor& xT_a, const Tensor& xT_b, double lambda,
                   std::uint64_t chain_seed);

/// Masked generation: mask == 1 marks known content, which is re-noised to
/// the current step each iteration; mask == 0 regions are denoised by the
/// model. The output equals `known` exactly where mask == 1.
Tensor inpaint(const EGCModel& model, const NoiseSchedule& ns, const Tensor& known,
               const Tensor& mask, const SampleConfig& config);

}  // namespace egc
