#include "egc/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egc {

namespace {

constexpr double kBetaMin = 1e-12;
constexpr double kBetaMax = 0.999;

void validate(const NoiseSchedule& ns) {
  if (ns.T < 2) throw std::invalid_argument("schedule: T must be at least 2");
  double prev_bar = 1.0;
  for (std::size_t i = 0; i < ns.T; ++i) {
    if (!(ns.beta[i] > 0.0 && ns.beta[i] < 1.0)) {
      throw std::runtime_error("schedule: beta outside (0, 1) at t=" +
                               std::to_string(i + 1));
    }
    if (!(ns.alpha_bar[i] < prev_bar)) {
      throw std::runtime_error("schedule: alpha_bar not strictly decreasing at t=" +
                               std::to_string(i + 1));
    }
    prev_bar = ns.alpha_bar[i];
  }
  if (!(ns.alpha_bar[ns.T - 1] < 0.05)) {
    throw std::runtime_error("schedule: terminal alpha_bar too large");
  }
}

void range_check(const NoiseSchedule& ns, std::size_t t, std::size_t t_min,
                 const char* op) {
  if (t < t_min || t > ns.T) {
    throw std::out_of_range(std::string(op) + ": t=" + std::to_string(t) +
                            " outside [" + std::to_string(t_min) + ", " +
                            std::to_string(ns.T) + "]");
  }
}

}  // namespace

NoiseSchedule NoiseSchedule::from_beta(Kind kind, std::vector<double> beta) {
  NoiseSchedule ns;
  ns.kind = kind;
  ns.T = beta.size();
  ns.beta = std::move(beta);
  ns.alpha.resize(ns.T);
  ns.alpha_bar.resize(ns.T);
  ns.beta_tilde.resize(ns.T);
  double bar = 1.0;
  for (std::size_t i = 0; i < ns.T; ++i) {
    ns.alpha[i] = 1.0 - ns.beta[i];
    const double prev_bar = bar;
    bar *= ns.alpha[i];
    ns.alpha_bar[i] = bar;
    ns.beta_tilde[i] = (1.0 - prev_bar) / (1.0 - bar) * ns.beta[i];
  }
  validate(ns);
  return ns;
}

NoiseSchedule NoiseSchedule::linear(std::size_t T) {
  if (T < 2) throw std::invalid_argument("linear schedule: T must be at least 2");
  // Endpoints of the 1000-step reference schedule, rescaled so a shorter
  // chain accumulates the same total noise.
  const double s = 1000.0 / static_cast<double>(T);
  const double b0 = 1e-4 * s;
  const double b1 = 0.02 * s;
  std::vector<double> beta(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double u = (T == 1) ? 0.0
                              : static_cast<double>(i) / static_cast<double>(T - 1);
    beta[i] = std::clamp(b0 + (b1 - b0) * u, kBetaMin, kBetaMax);
  }
  return from_beta(Kind::linear, std::move(beta));
}

NoiseSchedule NoiseSchedule::cosine(std::size_t T) {
  if (T < 2) throw std::invalid_argument("cosine schedule: T must be at least 2");
  const double offset = 0.008;
  auto g = [offset](double u) {
    const double v = std::cos((u + offset) / (1.0 + offset) * M_PI / 2.0);
    return v * v;
  };
  const double g0 = g(0.0);
  std::vector<double> beta(T);
  double prev = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double bar = g(static_cast<double>(i + 1) / static_cast<double>(T)) / g0;
    beta[i] = std::clamp(1.0 - bar / prev, kBetaMin, kBetaMax);
    prev *= 1.0 - beta[i];
  }
  return from_beta(Kind::cosine, std::move(beta));
}

NoiseSchedule NoiseSchedule::make(Kind kind, std::size_t T) {
  return kind == Kind::linear ? linear(T) : cosine(T);
}

double NoiseSchedule::beta_t(std::size_t t) const {
  range_check(*this, t, 1, "beta_t");
  return beta[t - 1];
}

double NoiseSchedule::alpha_t(std::size_t t) const {
  range_check(*this, t, 1, "alpha_t");
  return alpha[t - 1];
}

double NoiseSchedule::alpha_bar_t(std::size_t t) const {
  if (t == 0) return 1.0;
  range_check(*this, t, 1, "alpha_bar_t");
  return alpha_bar[t - 1];
}

double NoiseSchedule::beta_tilde_t(std::size_t t) const {
  range_check(*this, t, 1, "beta_tilde_t");
  return beta_tilde[t - 1];
}

NoiseSchedule::Kind NoiseSchedule::parse_kind(const std::string& name) {
  if (name == "linear") return Kind::linear;
  if (name == "cosine") return Kind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

std::string NoiseSchedule::kind_name(Kind kind) {
  return kind == Kind::linear ? "linear" : "cosine";
}

Tensor q_sample(const NoiseSchedule& ns, const Tensor& x0, std::size_t t,
                const Tensor& eps) {
  range_check(ns, t, 0, "q_sample");
  if (eps.shape() != x0.shape()) {
    throw std::invalid_argument("q_sample: eps shape " + shape_str(eps.shape()) +
                                " does not match x0 shape " + shape_str(x0.shape()));
  }
  const double abar = ns.alpha_bar_t(t);
  return add(scale(x0, std::sqrt(abar)), scale(eps, std::sqrt(1.0 - abar)));
}

Tensor score_target(const NoiseSchedule& ns, const Tensor& eps, std::size_t t) {
  range_check(ns, t, 1, "score_target");
  const double abar = ns.alpha_bar_t(t);
  return scale(eps, -1.0 / std::sqrt(1.0 - abar));
}

PosteriorParams posterior_params(const NoiseSchedule& ns, const Tensor& x0,
                                 const Tensor& xt, std::size_t t) {
  range_check(ns, t, 1, "posterior_params");
  if (x0.shape() != xt.shape()) {
    throw std::invalid_argument("posterior_params: x0/xt shape mismatch");
  }
  const double abar = ns.alpha_bar_t(t);
  const double abar_prev = ns.alpha_bar_t(t - 1);
  const double beta = ns.beta_t(t);
  const double alpha = ns.alpha_t(t);
  const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
  const double ct = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
  return PosteriorParams{add(scale(x0, c0), scale(xt, ct)), ns.beta_tilde_t(t)};
}

Tensor tweedie_x0(const NoiseSchedule& ns, const Tensor& xt, const Tensor& score,
                  std::size_t t) {
  range_check(ns, t, 0, "tweedie_x0");
  if (xt.shape() != score.shape()) {
    throw std::invalid_argument("tweedie_x0: xt/score shape mismatch");
  }
  const double abar = ns.alpha_bar_t(t);
  return scale(add(xt, scale(score, 1.0 - abar)), 1.0 / std::sqrt(abar));
}

}  // namespace egc
