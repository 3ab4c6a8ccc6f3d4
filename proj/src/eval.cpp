#include "egc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace egc {

AttackConfig::Kind AttackConfig::parse_kind(const std::string& name) {
  if (name == "fgsm") return Kind::fgsm;
  if (name == "pgd") return Kind::pgd;
  throw std::invalid_argument("unknown attack kind '" + name + "'");
}

std::string AttackConfig::kind_name(Kind kind) {
  return kind == Kind::fgsm ? "fgsm" : "pgd";
}

double AttackConfig::effective_step() const {
  if (step_size > 0.0) return step_size;
  return 2.5 * epsilon / static_cast<double>(std::max<std::size_t>(steps, 1));
}

namespace {

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.shape()[0];
  const std::size_t c = logits.shape().back();
  std::vector<std::size_t> out(b);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (lv[i * c + j] > lv[i * c + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

// Gradient of summed cross-entropy w.r.t. the input, at timestep 0.
Tensor ce_input_grad(const EGCModel& model, const Tensor& x_value,
                     const std::vector<std::size_t>& y) {
  Tensor x = Tensor::from_data(x_value.shape(), x_value.data(), true);
  Tensor f = model.logits(x, 0);
  Tensor ce = sum_all(sub(logsumexp_last(f), gather_last(f, y)));
  return backward(ce, false, {x}).get(x);
}

Tensor signed_step_clip(const Tensor& base, const Tensor& current,
                        const Tensor& grad, double step, double epsilon) {
  const auto& bv = base.data();
  const auto& cv = current.data();
  const auto& gv = grad.data();
  std::vector<double> out(cv.size());
  for (std::size_t i = 0; i < cv.size(); ++i) {
    const double s = gv[i] > 0.0 ? 1.0 : (gv[i] < 0.0 ? -1.0 : 0.0);
    double v = cv[i] + step * s;
    v = std::clamp(v, bv[i] - epsilon, bv[i] + epsilon);
    out[i] = std::clamp(v, -1.0, 1.0);
  }
  return Tensor::from_data(current.shape(), std::move(out));
}

}  // namespace

double accuracy(const EGCModel& model, const Dataset& data, std::size_t t) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  if (!data.labeled()) throw std::invalid_argument("accuracy: unlabeled dataset");
  NoGradGuard ng;
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t stop = std::min(start + kChunk, data.size());
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor f = model.logits(data.batch(idx), t);
    auto pred = argmax_rows(f);
    auto truth = data.batch_labels(idx);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == truth[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Tensor fgsm(const EGCModel& model, const Tensor& x,
            const std::vector<std::size_t>& y, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  Tensor grad = ce_input_grad(model, x, y);
  return signed_step_clip(x, x, grad, epsilon, epsilon);
}

Tensor pgd(const EGCModel& model, const Tensor& x,
           const std::vector<std::size_t>& y, const AttackConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("pgd: step count must be >= 1");
  const double step = cfg.effective_step();
  if (step <= 0.0 && cfg.epsilon > 0.0) {
    throw std::invalid_argument("pgd: step size must be positive");
  }
  Tensor adv = x;
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    Tensor grad = ce_input_grad(model, adv, y);
    adv = signed_step_clip(x, adv, grad, step, cfg.epsilon);
  }
  return adv;
}

std::vector<RobustnessRow> robustness_sweep(const EGCModel& model,
                                            const EGCModel* baseline,
                                            const Dataset& data,
                                            const std::vector<double>& epsilons,
                                            const AttackConfig& pgd_cfg) {
  if (!data.labeled()) throw std::invalid_argument("robustness_sweep: unlabeled data");
  std::vector<std::pair<std::string, const EGCModel*>> models{{"egc", &model}};
  if (baseline != nullptr) models.emplace_back("baseline", baseline);

  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Tensor xs = data.batch(idx);
  auto ys = data.batch_labels(idx);

  auto attacked_accuracy = [&](const EGCModel& m, const Tensor& adv) {
    NoGradGuard ng;
    auto pred = argmax_rows(m.logits(adv, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == ys[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
  };

  std::vector<RobustnessRow> rows;
  for (const auto& [name, m] : models) {
    for (const char* attack : {"fgsm", "pgd"}) {
      for (double eps : epsilons) {
        Tensor adv;
        if (std::string(attack) == "fgsm") {
          adv = fgsm(*m, xs, ys, eps);
        } else {
          AttackConfig cfg = pgd_cfg;
          cfg.epsilon = eps;
          adv = pgd(*m, xs, ys, cfg);
        }
        rows.push_back(RobustnessRow{name, attack, eps, attacked_accuracy(*m, adv)});
      }
    }
  }
  return rows;
}

double sliced_wasserstein(const Tensor& a, const Tensor& b,
                          std::size_t projections, RandomEngine& rng) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("sliced_wasserstein: expected [n, d] point sets");
  }
  const std::size_t n = a.shape()[0], d = a.shape()[1];
  if (b.shape()[1] != d) {
    throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  }
  if (b.shape()[0] != n) {
    throw std::invalid_argument("sliced_wasserstein: point counts must agree");
  }
  if (n == 0) throw std::invalid_argument("sliced_wasserstein: empty point set");
  if (projections == 0) {
    throw std::invalid_argument("sliced_wasserstein: need at least one projection");
  }

  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> dir(d), pa(n), pb(n);
  double total = 0.0;
  for (std::size_t p = 0; p < projections; ++p) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (auto& v : dir) v /= norm;

    for (std::size_t i = 0; i < n; ++i) {
      double sa = 0.0, sb = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        sa += av[i * d + j] * dir[j];
        sb += bv[i * d + j] * dir[j];
      }
      pa[i] = sa;
      pb[i] = sb;
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double w1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) w1 += std::abs(pa[i] - pb[i]);
    total += w1 / static_cast<double>(n);
  }
  return total / static_cast<double>(projections);
}

std::vector<std::pair<double, double>> energy_noise_profile(
    const EGCModel& model, const NoiseSchedule& ns, const Tensor& x0, std::size_t t,
    const std::vector<double>& scales, RandomEngine& rng) {
  NoGradGuard ng;
  const std::size_t n = x0.shape()[0];
  const std::size_t dims = x0.size() / n;
  const double sqrt_abar = std::sqrt(ns.alpha_bar_t(t));
  std::vector<std::pair<double, double>> out;
  for (double k : scales) {
    if (k < 0.0) throw std::invalid_argument("energy_noise_profile: negative scale");
    Tensor eps = rng.normal_tensor(x0.shape());
    std::vector<double> noisy(x0.data());
    const auto& ev = eps.data();
    for (std::size_t i = 0; i < n; ++i) {
      double mean_abs = 0.0;
      for (std::size_t j = 0; j < dims; ++j) mean_abs += std::abs(ev[i * dims + j]);
      mean_abs /= static_cast<double>(dims);
      const double factor = (mean_abs > 0.0 && k > 0.0) ? k / mean_abs : 0.0;
      for (std::size_t j = 0; j < dims; ++j) {
        noisy[i * dims + j] =
            sqrt_abar * noisy[i * dims + j] + factor * ev[i * dims + j];
      }
    }
    Tensor x = Tensor::from_data(x0.shape(), std::move(noisy));
    Tensor lse = logsumexp_last(model.logits(x, t));
    double mean = 0.0;
    for (double v : lse.data()) mean += v;
    out.emplace_back(k, mean / static_cast<double>(n));
  }
  return out;
}

double DensityGrid::at(std::size_t ib, std::size_t ia) const {
  return values[ib * resolution + ia];
}

DensityGrid density_grid_2d(const EGCModel& model, const NoiseSchedule& ns,
                            const Tensor& x0, std::size_t t, const Tensor& eps_u,
                            const Tensor& eps_v, std::size_t resolution,
                            double extent) {
  if (resolution < 2) throw std::invalid_argument("density_grid_2d: resolution < 2");
  if (x0.shape()[0] != 1) {
    throw std::invalid_argument("density_grid_2d: expected a single base sample");
  }
  if (eps_u.shape() != x0.shape() || eps_v.shape() != x0.shape()) {
    throw std::invalid_argument("density_grid_2d: direction shape mismatch");
  }
  NoGradGuard ng;
  const std::size_t dims = x0.size();
  const double sqrt_abar = std::sqrt(ns.alpha_bar_t(t));

  // Gram-Schmidt orthonormalization of the two directions.
  std::vector<double> u(eps_u.data()), v(eps_v.data());
  double nu = 0.0;
  for (double x : u) nu += x * x;
  nu = std::sqrt(nu);
  if (nu < 1e-12) throw std::invalid_argument("density_grid_2d: zero direction");
  for (auto& x : u) x /= nu;
  double duv = 0.0;
  for (std::size_t i = 0; i < dims; ++i) duv += u[i] * v[i];
  for (std::size_t i = 0; i < dims; ++i) v[i] -= duv * u[i];
  double nv = 0.0;
  for (double x : v) nv += x * x;
  nv = std::sqrt(nv);
  if (nv < 1e-12) {
    throw std::invalid_argument("density_grid_2d: directions are collinear");
  }
  for (auto& x : v) x /= nv;

  DensityGrid grid;
  grid.resolution = resolution;
  grid.extent = extent;
  grid.values.resize(resolution * resolution);

  std::vector<double> base(x0.data());
  for (auto& x : base) x *= sqrt_abar;
  constexpr std::size_t kChunk = 1024;
  std::vector<double> coords;
  std::vector<std::size_t> cells;
  auto flush = [&]() {
    if (cells.empty()) return;
    Shape shape = x0.shape();
    shape[0] = cells.size();
    Tensor batch = Tensor::from_data(shape, coords);
    Tensor lse = logsumexp_last(model.logits(batch, t));
    for (std::size_t i = 0; i < cells.size(); ++i) grid.values[cells[i]] = lse.at(i);
    coords.clear();
    cells.clear();
  };
  for (std::size_t ib = 0; ib < resolution; ++ib) {
    const double b = -extent + 2.0 * extent * static_cast<double>(ib) /
                                   static_cast<double>(resolution - 1);
    for (std::size_t ia = 0; ia < resolution; ++ia) {
      const double a = -extent + 2.0 * extent * static_cast<double>(ia) /
                                     static_cast<double>(resolution - 1);
      for (std::size_t j = 0; j < dims; ++j) {
        coords.push_back(base[j] + a * u[j] + b * v[j]);
      }
      cells.push_back(ib * resolution + ia);
      if (cells.size() >= kChunk) flush();
    }
  }
  flush();
  return grid;
}

double grid_log_partition(const std::function<double(double, double)>& log_density,
                          double lo, double hi, std::size_t resolution) {
  if (resolution < 8) {
    throw std::invalid_argument("grid_log_partition: resolution must be >= 8");
  }
  if (!(hi > lo)) throw std::invalid_argument("grid_log_partition: empty box");
  const std::size_t n = resolution;
  const double h = (hi - lo) / static_cast<double>(n - 1);

  std::vector<double> vals(n * n);
  double vmax = -1e300;
  for (std::size_t iy = 0; iy < n; ++iy) {
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double x = lo + h * static_cast<double>(ix);
      const double y = lo + h * static_cast<double>(iy);
      const double v = log_density(x, y);
      vals[iy * n + ix] = v;
      vmax = std::max(vmax, v);
    }
  }
  double acc = 0.0;
  for (std::size_t iy = 0; iy < n; ++iy) {
    const double wy = (iy == 0 || iy == n - 1) ? 0.5 : 1.0;
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double wx = (ix == 0 || ix == n - 1) ? 0.5 : 1.0;
      acc += wx * wy * std::exp(vals[iy * n + ix] - vmax);
    }
  }
  return vmax + std::log(acc) + 2.0 * std::log(h);
}

double grid_log_partition(const EGCModel& model, std::size_t t, double lo, double hi,
                          std::size_t resolution) {
  if (model.config().arch != ModelConfig::Arch::mlp ||
      model.config().input_dim != 2) {
    throw std::invalid_argument("grid_log_partition: needs a 2-D input model");
  }
  NoGradGuard ng;
  // evaluate the whole grid in batched rows to keep matmuls large
  if (resolution < 8) {
    throw std::invalid_argument("grid_log_partition: resolution must be >= 8");
  }
  const std::size_t n = resolution;
  const double h = (hi - lo) / static_cast<double>(n - 1);
  std::vector<double> row_values(n * n);
  constexpr std::size_t kChunk = 2048;
  std::vector<double> coords;
  std::vector<std::size_t> cells;
  auto flush = [&]() {
    if (cells.empty()) return;
    Tensor batch = Tensor::from_data({cells.size(), 2}, coords);
    Tensor lse = logsumexp_last(model.logits(batch, t));
    for (std::size_t i = 0; i < cells.size(); ++i) row_values[cells[i]] = lse.at(i);
    coords.clear();
    cells.clear();
  };
  for (std::size_t iy = 0; iy < n; ++iy) {
    for (std::size_t ix = 0; ix < n; ++ix) {
      coords.push_back(lo + h * static_cast<double>(ix));
      coords.push_back(lo + h * static_cast<double>(iy));
      cells.push_back(iy * n + ix);
      if (cells.size() >= kChunk) flush();
    }
  }
  flush();
  double vmax = -1e300;
  for (double v : row_values) vmax = std::max(vmax, v);
  double acc = 0.0;
  for (std::size_t iy = 0; iy < n; ++iy) {
    const double wy = (iy == 0 || iy == n - 1) ? 0.5 : 1.0;
    for (std::size_t ix = 0; ix < n; ++ix) {
      const double wx = (ix == 0 || ix == n - 1) ? 0.5 : 1.0;
      acc += wx * wy * std::exp(row_values[iy * n + ix] - vmax);
    }
  }
  return vmax + std::log(acc) + 2.0 * std::log(h);
}

}  // namespace egc
