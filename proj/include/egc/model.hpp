#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "egc/random.hpp"
#include "egc/tensor.hpp"

namespace egc {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

/// Sinusoidal timestep features: sin/cos pairs over a geometric frequency
/// ladder. Deterministic in t; distinct integer timesteps map to distinct
/// vectors.
Tensor time_embedding(double t, std::size_t dim);

struct ModelConfig {
  enum class Arch { mlp, conv };

  Arch arch = Arch::mlp;
  std::size_t num_classes = 2;
  std::size_t t_max = 100;  // largest valid timestep input

  // mlp
  std::size_t input_dim = 2;
  std::size_t hidden = 128;
  std::size_t hidden_layers = 3;

  // conv
  std::size_t in_channels = 1;
  std::size_t image_size = 28;
  std::vector<std::size_t> conv_channels = {32, 64, 128};
  std::size_t gn_groups = 8;

  // time conditioning
  std::size_t temb_dim = 64;     // sinusoidal feature count
  std::size_t temb_hidden = 128; // width after the embedding MLP

  Shape input_shape() const;  // per-sample shape (excludes batch)

  std::string descriptor() const;
  static ModelConfig parse_descriptor(const std::string& text);
};

/// A classifier over noisy inputs whose logits double as an unnormalized
/// joint log-density: logit y is log p(x, y) up to a shared constant, the
/// negative log-sum-exp of the logits is the free energy of x, and input
/// gradients of the log-sum-exp give the score used for denoising.
class EGCModel {
 public:
  EGCModel(ModelConfig config, std::uint64_t seed);
  EGCModel(ModelConfig config, ParamList params);

  const ModelConfig& config() const { return config_; }
  const ParamList& params() const { return params_; }
  void set_params(ParamList params);
  /// Same architecture with a different parameter set (e.g. EMA weights).
  EGCModel with_params(ParamList params) const;

  std::size_t num_classes() const { return config_.num_classes; }

  /// x: [batch, ...input shape], t in [0, t_max]. Returns [batch, C].
  Tensor logits(const Tensor& x, std::size_t t) const;
  /// -logsumexp(logits): [batch].
  Tensor free_energy(const Tensor& x, std::size_t t) const;
  /// softmax(logits): [batch, C]; rows sum to 1.
  Tensor class_prob(const Tensor& x, std::size_t t) const;
  /// Logit of a fixed label: log p(x, y) + log Z. [batch].
  Tensor joint_unnormalized_logdensity(const Tensor& x, std::size_t t,
                                       std::size_t y) const;

  /// Gradient of logsumexp(logits) w.r.t. x. Requires x.requires_grad().
  Tensor unconditional_score(const Tensor& x, std::size_t t,
                             bool create_graph = false) const;
  /// unconditional score + s * grad log p(y | x).
  Tensor conditional_score(const Tensor& x, std::size_t t, std::size_t y,
                           double guidance_scale,
                           bool create_graph = false) const;

 private:
  Tensor param(const std::string& name) const;
  Tensor logits_mlp(const Tensor& x, const Tensor& temb) const;
  Tensor logits_conv(const Tensor& x, const Tensor& temb) const;
  Tensor time_features(std::size_t t, std::size_t batch) const;
  void check_input(const Tensor& x, std::size_t t) const;

  ModelConfig config_;
  ParamList params_;
};

/// Group normalization over channel groups of a [b,c,h,w] tensor,
/// composed from differentiable primitives.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

/// y = x W^T + b for x:[n,in], w:[out,in], b:[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Broadcast a length-c vector across a [b,c,h,w] image batch.
Tensor broadcast_channels(const Tensor& v, std::size_t batch, std::size_t chan,
                          std::size_t height, std::size_t width);

}  // namespace egc
