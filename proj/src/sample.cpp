#include "egc/sample.hpp"

#include <cmath>
#include <stdexcept>

namespace egc {

SampleConfig::Sampler SampleConfig::parse_sampler(const std::string& name) {
  if (name == "ancestral") return Sampler::ancestral;
  if (name == "langevin") return Sampler::langevin;
  throw std::invalid_argument("unknown sampler '" + name + "'");
}

std::string SampleConfig::sampler_name(Sampler s) {
  return s == Sampler::ancestral ? "ancestral" : "langevin";
}

Tensor ancestral_step(const NoiseSchedule& ns, const Tensor& xt, std::size_t t,
                      const Tensor& score, const Tensor& eps) {
  if (t < 1 || t > ns.T) {
    throw std::out_of_range("ancestral_step: t=" + std::to_string(t) +
                            " outside [1, " + std::to_string(ns.T) + "]");
  }
  if (score.shape() != xt.shape()) {
    throw std::invalid_argument("ancestral_step: score shape mismatch");
  }
  const double alpha = ns.alpha_t(t);
  const double beta = ns.beta_t(t);
  Tensor mean = scale(add(xt, scale(score, 1.0 - alpha)), 1.0 / std::sqrt(alpha));
  if (t == 1) return mean;
  if (eps.shape() != xt.shape()) {
    throw std::invalid_argument("ancestral_step: noise shape mismatch");
  }
  return add(mean, scale(eps, std::sqrt(beta)));
}

Tensor ancestral_chain(const NoiseSchedule& ns, const ScoreFn& score_fn, Tensor x,
                       RandomEngine& rng) {
  for (std::size_t t = ns.T; t >= 1; --t) {
    try {
      Tensor score = score_fn(x, t);
      Tensor eps = (t > 1) ? rng.normal_tensor(x.shape()) : Tensor();
      x = ancestral_step(ns, x, t, score, eps);
    } catch (const std::exception& e) {
      throw std::runtime_error("sampling aborted at t=" + std::to_string(t) + ": " +
                               e.what());
    }
  }
  return x;
}

ScoreFn model_score_fn(const EGCModel& model, std::optional<std::size_t> label,
                       double guidance_scale) {
  return [&model, label, guidance_scale](const Tensor& xt, std::size_t t) {
    Tensor x = Tensor::from_data(xt.shape(), xt.data(), true);
    if (label.has_value()) {
      return model.conditional_score(x, t, *label, guidance_scale);
    }
    return model.unconditional_score(x, t);
  };
}

Tensor generate(const EGCModel& model, const NoiseSchedule& ns,
                const SampleConfig& config) {
  if (config.num_samples == 0) {
    throw std::invalid_argument("generate: num_samples must be positive");
  }
  Shape shape = model.config().input_shape();
  shape.insert(shape.begin(), config.num_samples);
  RandomEngine rng = RandomEngine::from_stream(config.seed, 0);
  Tensor x = rng.normal_tensor(shape);
  return ancestral_chain(ns, model_score_fn(model, config.label, config.guidance_scale),
                         std::move(x), rng);
}

Tensor langevin_sample(const ScoreFn& score_fn, std::size_t t, Tensor x, double c,
                       std::size_t steps, RandomEngine& rng,
                       double divergence_bound) {
  if (c <= 0.0) throw std::invalid_argument("langevin: step size must be positive");
  const double noise_scale = std::sqrt(2.0 * c);
  for (std::size_t i = 0; i < steps; ++i) {
    Tensor score = score_fn(x, t);
    Tensor eps = rng.normal_tensor(x.shape());
    x = add(add(x, scale(score, c)), scale(eps, noise_scale));
    for (double v : x.data()) {
      if (std::abs(v) > divergence_bound) {
        throw std::runtime_error("langevin: chain diverged at step " +
                                 std::to_string(i + 1));
      }
    }
  }
  return x;
}

Tensor slerp(const Tensor& a, const Tensor& b, double lambda) {
  if (a.shape() != b.shape()) throw std::invalid_argument("slerp: shape mismatch");
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("slerp: lambda must lie in [0, 1]");
  }
  const auto& av = a.data();
  const auto& bv = b.data();
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    na += av[i] * av[i];
    nb += bv[i] * bv[i];
    dot += av[i] * bv[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double ca, cb;
  if (na < 1e-12 || nb < 1e-12) {
    ca = 1.0 - lambda;  // degenerate input: fall back to linear
    cb = lambda;
  } else {
    const double cosw = std::clamp(dot / (na * nb), -1.0, 1.0);
    const double w = std::acos(cosw);
    const double sw = std::sin(w);
    if (sw < 1e-9) {
      ca = 1.0 - lambda;
      cb = lambda;
    } else {
      ca = std::sin((1.0 - lambda) * w) / sw;
      cb = std::sin(lambda * w) / sw;
    }
  }
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = ca * av[i] + cb * bv[i];
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor interpolate(const EGCModel& model, const NoiseSchedule& ns,
                   const Tensor& xT_a, const Tensor& xT_b, double lambda,
                   std::uint64_t chain_seed) {
  Tensor x = slerp(xT_a, xT_b, lambda);
  RandomEngine rng = RandomEngine::from_stream(chain_seed, 0);
  return ancestral_chain(ns, model_score_fn(model, std::nullopt, 0.0), std::move(x),
                         rng);
}

namespace {

// out[i] = mask[i] ? known[i] : fill[i]; exact selection, no arithmetic.
Tensor masked_mix(const Tensor& mask, const Tensor& known, const Tensor& fill) {
  const auto& mv = mask.data();
  const auto& kv = known.data();
  const auto& fv = fill.data();
  std::vector<double> out(mv.size());
  for (std::size_t i = 0; i < mv.size(); ++i) out[i] = mv[i] != 0.0 ? kv[i] : fv[i];
  return Tensor::from_data(fill.shape(), std::move(out));
}

}  // namespace

Tensor inpaint(const EGCModel& model, const NoiseSchedule& ns, const Tensor& known,
               const Tensor& mask, const SampleConfig& config) {
  Shape shape = model.config().input_shape();
  shape.insert(shape.begin(), config.num_samples);
  Tensor known_b = known;
  Tensor mask_b = mask;
  if (known.shape() != shape || mask.shape() != shape) {
    // allow a single [known/mask] sample to be broadcast across the batch
    Shape single = model.config().input_shape();
    single.insert(single.begin(), 1);
    if (known.shape() != single || mask.shape() != single) {
      throw std::invalid_argument("inpaint: mask/known shape mismatch");
    }
    std::vector<double> kd, md;
    for (std::size_t i = 0; i < config.num_samples; ++i) {
      kd.insert(kd.end(), known.data().begin(), known.data().end());
      md.insert(md.end(), mask.data().begin(), mask.data().end());
    }
    known_b = Tensor::from_data(shape, std::move(kd));
    mask_b = Tensor::from_data(shape, std::move(md));
  }
  for (double v : mask_b.data()) {
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("inpaint: mask values must be 0 or 1");
    }
  }

  // Stream 0 mirrors unconditional generation exactly; stream 1 re-noises
  // the known region, so an all-zero mask reproduces generate() bit for bit.
  RandomEngine chain_rng = RandomEngine::from_stream(config.seed, 0);
  RandomEngine known_rng = RandomEngine::from_stream(config.seed, 1);
  ScoreFn score_fn = model_score_fn(model, config.label, config.guidance_scale);

  Tensor x = chain_rng.normal_tensor(shape);
  x = masked_mix(mask_b, q_sample(ns, known_b, ns.T, known_rng.normal_tensor(shape)),
                 x);
  for (std::size_t t = ns.T; t >= 1; --t) {
    Tensor candidate;
    try {
      Tensor score = score_fn(x, t);
      Tensor eps = (t > 1) ? chain_rng.normal_tensor(shape) : Tensor();
      candidate = ancestral_step(ns, x, t, score, eps);
    } catch (const std::exception& e) {
      throw std::runtime_error("inpaint aborted at t=" + std::to_string(t) + ": " +
                               e.what());
    }
    Tensor known_t = (t - 1 == 0)
                         ? known_b
                         : q_sample(ns, known_b, t - 1, known_rng.normal_tensor(shape));
    x = masked_mix(mask_b, known_t, candidate);
  }
  return x;
}

}  // namespace egc
