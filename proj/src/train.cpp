#include "egc/train.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "egc/random.hpp"

namespace egc {

TrainConfig::Mode TrainConfig::parse_mode(const std::string& name) {
  if (name == "supervised") return Mode::supervised;
  if (name == "unsupervised") return Mode::unsupervised;
  if (name == "discriminative") return Mode::discriminative;
  throw std::invalid_argument("unknown training mode '" + name + "'");
}

std::string TrainConfig::mode_name(Mode mode) {
  switch (mode) {
    case Mode::supervised: return "supervised";
    case Mode::unsupervised: return "unsupervised";
    case Mode::discriminative: return "discriminative";
  }
  return "?";
}

// ---- loss ---------------------------------------------------------------------

LossBreakdown egc_loss_from_parts(const Tensor& score, const Tensor& target,
                                  const Tensor* logits,
                                  const std::vector<std::size_t>* labels,
                                  double gamma) {
  if (score.shape() != target.shape()) {
    throw std::invalid_argument("loss: score/target shape mismatch");
  }
  const auto batch = static_cast<double>(score.shape()[0]);
  Tensor recon = scale(sum_all(square(sub(score, target))), 1.0 / batch);

  LossBreakdown out;
  out.recon = recon.item();

  if (logits != nullptr && labels != nullptr) {
    if (labels->size() != logits->shape()[0]) {
      throw std::invalid_argument("loss: label count does not match batch");
    }
    const std::size_t classes = logits->shape().back();
    for (auto y : *labels) {
      if (y >= classes) {
        throw std::out_of_range("loss: label " + std::to_string(y) +
                                " outside [0, " + std::to_string(classes) + ")");
      }
    }
    Tensor lse = logsumexp_last(*logits);
    Tensor fy = gather_last(*logits, *labels);
    Tensor ce = scale(sum_all(sub(lse, fy)), 1.0 / batch);
    out.ce = ce.item();
    out.loss = add(recon, scale(ce, gamma));
  } else {
    out.ce = 0.0;
    out.loss = recon;
  }
  return out;
}

namespace {

double batch_accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.shape()[0];
  const std::size_t c = logits.shape().back();
  if (b == 0) return 0.0;
  std::size_t correct = 0;
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (lv[i * c + j] > lv[i * c + best]) best = j;
    }
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

}  // namespace

LossBreakdown egc_loss(const EGCModel& model, const NoiseSchedule& ns,
                       const Tensor& x0, const std::vector<std::size_t>* labels,
                       std::size_t t, const Tensor& eps, const TrainConfig& cfg) {
  if (cfg.mode == TrainConfig::Mode::discriminative) {
    // plain classifier on clean inputs
    if (labels == nullptr) {
      throw std::invalid_argument("discriminative training needs labels");
    }
    Tensor f = model.logits(x0, 0);
    Tensor zero = Tensor::zeros(x0.shape());
    LossBreakdown out = egc_loss_from_parts(zero, zero, &f, labels, 1.0);
    out.recon = 0.0;
    out.batch_acc = batch_accuracy(f, *labels);
    return out;
  }

  Tensor xt_value = q_sample(ns, x0, t, eps);
  Tensor xt = Tensor::from_data(xt_value.shape(), xt_value.data(), true);

  Tensor f = model.logits(xt, t);
  Tensor total = sum_all(logsumexp_last(f));
  Tensor score = backward(total, /*create_graph=*/true, {xt}).get(xt);

  Tensor target = cfg.scaled_score_target ? score_target(ns, eps, t) : neg(eps);

  const bool use_labels =
      cfg.mode == TrainConfig::Mode::supervised && labels != nullptr;
  LossBreakdown out = egc_loss_from_parts(score, target, use_labels ? &f : nullptr,
                                          use_labels ? labels : nullptr, cfg.gamma);
  if (labels != nullptr) out.batch_acc = batch_accuracy(f, *labels);
  return out;
}

// ---- optimizer -------------------------------------------------------------------

AdamState AdamState::init(const ParamList& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& [name, p] : params) {
    (void)name;
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

ParamList adam_update(const ParamList& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr, double beta1, double beta2,
                      double eps) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adam: parameter/gradient count mismatch");
  }
  state.step += 1;
  const auto step = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(beta1, step);
  const double bc2 = 1.0 - std::pow(beta2, step);

  ParamList out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (grads[i].shape() != p.shape()) {
      throw std::invalid_argument("adam: gradient shape mismatch for '" + name + "'");
    }
    const auto& pv = p.data();
    const auto& gv = grads[i].data();
    std::vector<double> m(state.m[i].data());
    std::vector<double> v(state.v[i].data());
    std::vector<double> np(pv.size());
    for (std::size_t j = 0; j < pv.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * gv[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * gv[j] * gv[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      np[j] = pv[j] - lr * mhat / (std::sqrt(vhat) + eps);
    }
    state.m[i] = Tensor::from_data(p.shape(), std::move(m));
    state.v[i] = Tensor::from_data(p.shape(), std::move(v));
    out.emplace_back(name, Tensor::from_data(p.shape(), std::move(np), true));
  }
  return out;
}

ParamList ema_update(const ParamList& ema_params, const ParamList& params,
                     double decay) {
  if (decay < 0.0 || decay >= 1.0) {
    throw std::invalid_argument("ema: decay must lie in [0, 1)");
  }
  if (ema_params.size() != params.size()) {
    throw std::invalid_argument("ema: parameter count mismatch");
  }
  ParamList out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& ev = ema_params[i].second.data();
    const auto& pv = params[i].second.data();
    std::vector<double> nv(ev.size());
    for (std::size_t j = 0; j < ev.size(); ++j) {
      nv[j] = decay * ev[j] + (1.0 - decay) * pv[j];
    }
    out.emplace_back(params[i].first,
                     Tensor::from_data(params[i].second.shape(), std::move(nv)));
  }
  return out;
}

// ---- checkpoint io ------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'G', 'C', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

void put_string(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

void put_tensor_block(std::string& out, const std::string& name, const Tensor& t) {
  put_string(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
  for (auto d : t.shape()) put_u64(out, d);
  for (double v : t.data()) put_f64(out, v);
}

void put_section(std::string& out, const ParamList& params) {
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) put_tensor_block(out, name, t);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw std::runtime_error("checkpoint '" + path + "' is truncated");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Tensor tensor_block(std::string& name, bool requires_grad) {
    name = str();
    const std::uint32_t rank = u32();
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = f64();
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
  }
  ParamList section(bool requires_grad) {
    const std::uint32_t count = u32();
    ParamList out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name;
      Tensor t = tensor_block(name, requires_grad);
      out.emplace_back(std::move(name), std::move(t));
    }
    return out;
  }
};

}  // namespace

void Checkpoint::save(const std::string& path) const {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_string(out, model_config.descriptor());
  put_string(out, NoiseSchedule::kind_name(schedule.kind));
  put_u64(out, schedule.T);
  for (double b : schedule.beta) put_f64(out, b);
  put_section(out, params);
  put_section(out, ema_params);
  put_section(out, adam_m);
  put_section(out, adam_v);
  put_string(out, rng_state);
  put_u64(out, iteration);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint '" + path + "' has a bad magic header");
  }
  Reader r{buf, 4, path};
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("checkpoint '" + path + "' has unsupported version " +
                             std::to_string(version));
  }
  Checkpoint ck;
  ck.model_config = ModelConfig::parse_descriptor(r.str());
  const auto kind = NoiseSchedule::parse_kind(r.str());
  const std::uint64_t T = r.u64();
  std::vector<double> beta(T);
  for (auto& b : beta) b = r.f64();
  ck.schedule = NoiseSchedule::from_beta(kind, std::move(beta));
  ck.params = r.section(true);
  ck.ema_params = r.section(false);
  ck.adam_m = r.section(false);
  ck.adam_v = r.section(false);
  ck.rng_state = r.str();
  ck.iteration = r.u64();
  if (r.pos != buf.size()) {
    throw std::runtime_error("checkpoint '" + path + "' has trailing bytes");
  }
  return ck;
}

// ---- training loop -----------------------------------------------------------------

namespace {

ParamList detached_copy(const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.emplace_back(name, t.detach());
  return out;
}

}  // namespace

TrainResult train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg,
                       const Dataset& data,
                       const std::optional<Checkpoint>& resume,
                       const CheckpointSink& sink) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const bool needs_labels = cfg.mode != TrainConfig::Mode::unsupervised;
  if (needs_labels && !data.labeled()) {
    throw std::invalid_argument("train: mode '" + TrainConfig::mode_name(cfg.mode) +
                                "' requires a labeled dataset");
  }

  Checkpoint ck;
  AdamState adam;
  RandomEngine rng(0);
  if (resume.has_value()) {
    ck = *resume;
    adam.step = ck.iteration;
    adam.m.clear();
    adam.v.clear();
    for (auto& [n, t] : ck.adam_m) adam.m.push_back(t);
    for (auto& [n, t] : ck.adam_v) adam.v.push_back(t);
    rng = RandomEngine::deserialize(ck.rng_state);
  } else {
    ModelConfig mc = model_cfg;
    mc.t_max = cfg.T;
    EGCModel model(mc, cfg.seed);
    ck.model_config = mc;
    ck.params = model.params();
    ck.ema_params = detached_copy(model.params());
    ck.schedule = NoiseSchedule::make(cfg.schedule_kind, cfg.T);
    ck.iteration = 0;
    adam = AdamState::init(ck.params);
    rng = RandomEngine::from_stream(cfg.seed, 0x7ea1);
  }

  EGCModel model(ck.model_config, ck.params);
  const NoiseSchedule& ns = ck.schedule;
  std::vector<Tensor> param_tensors;

  TrainResult result;
  const Shape sample = data.sample_shape();

  auto snapshot = [&](std::uint64_t iter) {
    ck.params = model.params();
    ck.adam_m.clear();
    ck.adam_v.clear();
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
      ck.adam_m.emplace_back(ck.params[i].first, adam.m[i]);
      ck.adam_v.emplace_back(ck.params[i].first, adam.v[i]);
    }
    ck.rng_state = rng.serialize();
    ck.iteration = iter;
  };

  for (std::uint64_t iter = ck.iteration + 1; iter <= cfg.total_iterations; ++iter) {
    std::vector<std::size_t> indices(cfg.batch_size);
    for (auto& ix : indices) ix = rng.uniform_int(data.size());
    Tensor x0 = data.batch(indices);
    std::vector<std::size_t> labels;
    if (data.labeled()) labels = data.batch_labels(indices);

    std::size_t t = 0;
    Tensor eps;
    if (cfg.mode != TrainConfig::Mode::discriminative) {
      t = 1 + rng.uniform_int(cfg.T);
      Shape eshape = sample;
      eshape.insert(eshape.begin(), cfg.batch_size);
      eps = rng.normal_tensor(eshape);
    }

    LossBreakdown lb;
    try {
      lb = egc_loss(model, ns, x0, data.labeled() ? &labels : nullptr, t, eps, cfg);
    } catch (const std::exception& e) {
      throw std::runtime_error("train: aborted at iteration " + std::to_string(iter) +
                               ", t=" + std::to_string(t) + ": " + e.what());
    }

    GradientMap gm;
    {
      param_tensors.clear();
      for (const auto& [n, p] : model.params()) param_tensors.push_back(p);
      gm = backward(lb.loss, /*create_graph=*/false, param_tensors);
    }
    std::vector<Tensor> grads;
    grads.reserve(param_tensors.size());
    for (const auto& p : param_tensors) grads.push_back(gm.get_or_zeros(p));

    model.set_params(adam_update(model.params(), grads, adam, cfg.learning_rate));
    ck.ema_params = ema_update(ck.ema_params, model.params(), cfg.ema_decay);

    const double loss_value = lb.loss.item();
    if (cfg.metrics_every > 0 &&
        (iter % cfg.metrics_every == 0 || iter == cfg.total_iterations)) {
      result.metrics.push_back(MetricRow{iter, lb.recon, lb.ce, loss_value,
                                         lb.batch_acc});
    }
    if (sink && cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 &&
        iter != cfg.total_iterations) {
      snapshot(iter);
      sink(ck);
    }
  }

  snapshot(cfg.total_iterations);
  if (sink) sink(ck);
  result.checkpoint = ck;
  return result;
}

}  // namespace egc
