#include "egc/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace egc {

Tensor time_embedding(double t, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw std::invalid_argument("time_embedding: dim must be even and >= 2");
  }
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) /
                 static_cast<double>(half));
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return Tensor::from_data({1, dim}, std::move(out));
}

Shape ModelConfig::input_shape() const {
  if (arch == Arch::mlp) return {input_dim};
  return {in_channels, image_size, image_size};
}

std::string ModelConfig::descriptor() const {
  std::ostringstream os;
  os << "arch=" << (arch == Arch::mlp ? "mlp" : "conv");
  os << ";classes=" << num_classes;
  os << ";t_max=" << t_max;
  os << ";input_dim=" << input_dim;
  os << ";hidden=" << hidden;
  os << ";hidden_layers=" << hidden_layers;
  os << ";in_channels=" << in_channels;
  os << ";image_size=" << image_size;
  os << ";conv_channels=";
  for (std::size_t i = 0; i < conv_channels.size(); ++i) {
    if (i) os << ",";
    os << conv_channels[i];
  }
  os << ";gn_groups=" << gn_groups;
  os << ";temb_dim=" << temb_dim;
  os << ";temb_hidden=" << temb_hidden;
  return os.str();
}

ModelConfig ModelConfig::parse_descriptor(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("bad architecture descriptor entry '" + item + "'");
    }
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    if (key == "arch") {
      if (val == "mlp") cfg.arch = Arch::mlp;
      else if (val == "conv") cfg.arch = Arch::conv;
      else throw std::runtime_error("unknown architecture '" + val + "'");
    } else if (key == "classes") cfg.num_classes = std::stoul(val);
    else if (key == "t_max") cfg.t_max = std::stoul(val);
    else if (key == "input_dim") cfg.input_dim = std::stoul(val);
    else if (key == "hidden") cfg.hidden = std::stoul(val);
    else if (key == "hidden_layers") cfg.hidden_layers = std::stoul(val);
    else if (key == "in_channels") cfg.in_channels = std::stoul(val);
    else if (key == "image_size") cfg.image_size = std::stoul(val);
    else if (key == "gn_groups") cfg.gn_groups = std::stoul(val);
    else if (key == "temb_dim") cfg.temb_dim = std::stoul(val);
    else if (key == "temb_hidden") cfg.temb_hidden = std::stoul(val);
    else if (key == "conv_channels") {
      cfg.conv_channels.clear();
      std::istringstream cs(val);
      std::string c;
      while (std::getline(cs, c, ',')) cfg.conv_channels.push_back(std::stoul(c));
    } else {
      throw std::runtime_error("unknown architecture descriptor key '" + key + "'");
    }
  }
  return cfg;
}

// ---- layer helpers ----------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, transpose(w));
  // bias [out] broadcast over rows
  Tensor bias_rows = transpose(expand_last(b, x.shape()[0]));
  return add(y, bias_rows);
}

Tensor broadcast_channels(const Tensor& v, std::size_t batch, std::size_t chan,
                          std::size_t height, std::size_t width) {
  if (v.size() != chan) throw std::invalid_argument("broadcast_channels: size mismatch");
  Tensor per_chan = expand_last(reshape(v, {chan}), height * width);  // [c, h*w]
  Tensor flat = reshape(per_chan, {chan * height * width});
  Tensor batched = transpose(expand_last(flat, batch));  // [b, c*h*w]
  return reshape(batched, {batch, chan, height, width});
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  if (x.shape().size() != 4) throw std::invalid_argument("group_norm: 4-D input expected");
  const std::size_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
                    w = x.shape()[3];
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: channel count not divisible by groups");
  }
  const std::size_t m = (c / groups) * h * w;  // elements per group
  Tensor xg = reshape(x, {b * groups, m});
  Tensor mean = scale(sum_last(xg), 1.0 / static_cast<double>(m));
  Tensor centered = sub(xg, expand_last(mean, m));
  Tensor var = scale(sum_last(square(centered)), 1.0 / static_cast<double>(m));
  Tensor inv_std = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor normed = reshape(mul(centered, expand_last(inv_std, m)), {b, c, h, w});
  Tensor g_b = broadcast_channels(gamma, b, c, h, w);
  Tensor beta_b = broadcast_channels(beta, b, c, h, w);
  return add(mul(normed, g_b), beta_b);
}

// ---- model ------------------------------------------------------------------

namespace {

Tensor init_weight(RandomEngine& rng, std::size_t fan_out, std::size_t fan_in,
                   Shape shape) {
  (void)fan_out;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor w = rng.uniform_tensor(std::move(shape), -bound, bound);
  return Tensor::from_data(w.shape(), w.data(), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

}  // namespace

EGCModel::EGCModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  RandomEngine rng(splitmix64(seed));
  const std::size_t th = config_.temb_hidden;

  params_.emplace_back("temb.w1",
                       init_weight(rng, th, config_.temb_dim, {th, config_.temb_dim}));
  params_.emplace_back("temb.b1", zeros_param({th}));
  params_.emplace_back("temb.w2", init_weight(rng, th, th, {th, th}));
  params_.emplace_back("temb.b2", zeros_param({th}));

  if (config_.arch == ModelConfig::Arch::mlp) {
    const std::size_t hw = config_.hidden;
    params_.emplace_back("mlp.w1", init_weight(rng, hw, config_.input_dim,
                                               {hw, config_.input_dim}));
    params_.emplace_back("mlp.u1", init_weight(rng, hw, th, {hw, th}));
    params_.emplace_back("mlp.b1", zeros_param({hw}));
    for (std::size_t l = 2; l <= config_.hidden_layers; ++l) {
      const std::string n = std::to_string(l);
      params_.emplace_back("mlp.w" + n, init_weight(rng, hw, hw, {hw, hw}));
      params_.emplace_back("mlp.b" + n, zeros_param({hw}));
    }
    // Zero-initialized head keeps the initial score identically zero.
    params_.emplace_back("head.w", zeros_param({config_.num_classes, hw}));
    params_.emplace_back("head.b", zeros_param({config_.num_classes}));
  } else {
    std::size_t in_c = config_.in_channels;
    for (std::size_t s = 0; s < config_.conv_channels.size(); ++s) {
      const std::size_t out_c = config_.conv_channels[s];
      const std::string n = std::to_string(s + 1);
      params_.emplace_back("conv" + n + ".w",
                           init_weight(rng, out_c, in_c * 9, {out_c, in_c, 3, 3}));
      params_.emplace_back("conv" + n + ".b", zeros_param({out_c}));
      params_.emplace_back("conv" + n + ".gn_gamma", ones_param({out_c}));
      params_.emplace_back("conv" + n + ".gn_beta", zeros_param({out_c}));
      params_.emplace_back("conv" + n + ".t_proj",
                           init_weight(rng, out_c, th, {out_c, th}));
      params_.emplace_back("conv" + n + ".t_bias", zeros_param({out_c}));
      in_c = out_c;
    }
    params_.emplace_back("head.w", zeros_param({config_.num_classes, in_c}));
    params_.emplace_back("head.b", zeros_param({config_.num_classes}));
  }
}

EGCModel::EGCModel(ModelConfig config, ParamList params)
    : config_(std::move(config)), params_(std::move(params)) {}

void EGCModel::set_params(ParamList params) {
  if (params.size() != params_.size()) {
    throw std::invalid_argument("set_params: parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].first != params_[i].first ||
        params[i].second.shape() != params_[i].second.shape()) {
      throw std::invalid_argument("set_params: parameter layout mismatch at '" +
                                  params[i].first + "'");
    }
  }
  params_ = std::move(params);
}

EGCModel EGCModel::with_params(ParamList params) const {
  EGCModel m(config_, params_);
  m.set_params(std::move(params));
  return m;
}

Tensor EGCModel::param(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::runtime_error("model: unknown parameter '" + name + "'");
}

void EGCModel::check_input(const Tensor& x, std::size_t t) const {
  if (t > config_.t_max) {
    throw std::out_of_range("model: timestep " + std::to_string(t) +
                            " outside [0, " + std::to_string(config_.t_max) + "]");
  }
  const Shape expect_tail = config_.input_shape();
  const Shape& s = x.shape();
  if (s.size() != expect_tail.size() + 1 ||
      !std::equal(expect_tail.begin(), expect_tail.end(), s.begin() + 1)) {
    throw std::invalid_argument("model: input shape " + shape_str(s) +
                                " does not match architecture input " +
                                shape_str(expect_tail));
  }
}

Tensor EGCModel::time_features(std::size_t t, std::size_t batch) const {
  Tensor emb = time_embedding(static_cast<double>(t), config_.temb_dim);
  Tensor h = silu(linear(emb, param("temb.w1"), param("temb.b1")));
  Tensor f = silu(linear(h, param("temb.w2"), param("temb.b2")));  // [1, th]
  Tensor flat = reshape(f, {config_.temb_hidden});
  return transpose(expand_last(flat, batch));  // [batch, th]
}

Tensor EGCModel::logits_mlp(const Tensor& x, const Tensor& temb) const {
  Tensor h = matmul(x, transpose(param("mlp.w1")));
  h = add(h, matmul(temb, transpose(param("mlp.u1"))));
  h = add(h, transpose(expand_last(param("mlp.b1"), x.shape()[0])));
  h = silu(h);
  for (std::size_t l = 2; l <= config_.hidden_layers; ++l) {
    const std::string n = std::to_string(l);
    h = silu(linear(h, param("mlp.w" + n), param("mlp.b" + n)));
  }
  return linear(h, param("head.w"), param("head.b"));
}

Tensor EGCModel::logits_conv(const Tensor& x, const Tensor& temb) const {
  Tensor h = x;
  for (std::size_t s = 0; s < config_.conv_channels.size(); ++s) {
    const std::string n = std::to_string(s + 1);
    Tensor w = param("conv" + n + ".w");
    h = conv2d(h, w, 2, 1);
    const std::size_t b = h.shape()[0], c = h.shape()[1], hh = h.shape()[2],
                      ww = h.shape()[3];
    Tensor bias = broadcast_channels(param("conv" + n + ".b"), b, c, hh, ww);
    h = add(h, bias);
    h = group_norm(h, config_.gn_groups, param("conv" + n + ".gn_gamma"),
                   param("conv" + n + ".gn_beta"));
    // per-stage time conditioning: project, then add per channel
    Tensor tp = linear(temb, param("conv" + n + ".t_proj"),
                       param("conv" + n + ".t_bias"));  // [batch, c]
    Tensor tp_img = reshape(expand_last(reshape(tp, {b * c}), hh * ww),
                            {b, c, hh, ww});
    h = silu(add(h, tp_img));
  }
  // global mean pool over spatial positions
  const std::size_t b = h.shape()[0], c = h.shape()[1], hh = h.shape()[2],
                    ww = h.shape()[3];
  Tensor pooled = scale(sum_last(reshape(h, {b * c, hh * ww})),
                        1.0 / static_cast<double>(hh * ww));
  pooled = reshape(pooled, {b, c});
  return linear(pooled, param("head.w"), param("head.b"));
}

Tensor EGCModel::logits(const Tensor& x, std::size_t t) const {
  check_input(x, t);
  Tensor temb = time_features(t, x.shape()[0]);
  if (config_.arch == ModelConfig::Arch::mlp) {
    return logits_mlp(x, temb);
  }
  return logits_conv(x, temb);
}

Tensor EGCModel::free_energy(const Tensor& x, std::size_t t) const {
  return neg(logsumexp_last(logits(x, t)));
}

Tensor EGCModel::class_prob(const Tensor& x, std::size_t t) const {
  return softmax_last(logits(x, t));
}

Tensor EGCModel::joint_unnormalized_logdensity(const Tensor& x, std::size_t t,
                                               std::size_t y) const {
  if (y >= config_.num_classes) {
    throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(config_.num_classes) + ")");
  }
  Tensor f = logits(x, t);
  return gather_last(f, std::vector<std::size_t>(x.shape()[0], y));
}

Tensor EGCModel::unconditional_score(const Tensor& x, std::size_t t,
                                     bool create_graph) const {
  if (!x.requires_grad()) {
    throw std::invalid_argument("unconditional_score: input is detached");
  }
  Tensor total = sum_all(logsumexp_last(logits(x, t)));
  return backward(total, create_graph, {x}).get(x);
}

Tensor EGCModel::conditional_score(const Tensor& x, std::size_t t, std::size_t y,
                                   double guidance_scale, bool create_graph) const {
  if (y >= config_.num_classes) {
    throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(config_.num_classes) + ")");
  }
  if (guidance_scale < 0.0) {
    throw std::invalid_argument("conditional_score: guidance scale must be >= 0");
  }
  if (guidance_scale == 0.0) return unconditional_score(x, t, create_graph);
  // score + s * grad log p(y|x) = grad[(1-s) logsumexp(f) + s f_y]
  Tensor f = logits(x, t);
  Tensor lse = sum_all(logsumexp_last(f));
  Tensor fy = sum_all(gather_last(f, std::vector<std::size_t>(x.shape()[0], y)));
  Tensor total = add(scale(lse, 1.0 - guidance_scale), scale(fy, guidance_scale));
  return backward(total, create_graph, {x}).get(x);
}

}  // namespace egc
