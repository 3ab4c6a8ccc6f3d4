#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "egc/dataset.hpp"
#include "egc/model.hpp"
#include "egc/schedule.hpp"
#include "egc/tensor.hpp"

namespace egc {

struct TrainConfig {
  enum class Mode { supervised, unsupervised, discriminative };

  double gamma = 1e-3;          // weight of the classification term
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  std::size_t total_iterations = 5000;
  std::uint64_t seed = 0;
  Mode mode = Mode::supervised;
  double ema_decay = 0.999;
  NoiseSchedule::Kind schedule_kind = NoiseSchedule::Kind::linear;
  std::size_t T = 100;
  /// Regress the score onto -eps/sqrt(1-abar_t) instead of -eps.
  bool scaled_score_target = false;
  std::size_t metrics_every = 50;
  std::size_t checkpoint_every = 1000;

  static Mode parse_mode(const std::string& name);
  static std::string mode_name(Mode mode);
};

struct LossBreakdown {
  Tensor loss;        // scalar, graph-connected to the parameters
  double recon = 0.0;
  double ce = 0.0;
  double batch_acc = 0.0;
};

/// Loss formula on precomputed pieces, kept separate from the model so the
/// algebra can be tested against synthetic scores and logits.
/// recon = mean over rows of the squared distance between score rows and
/// target rows; ce = mean (logsumexp(f) - f_y); loss = recon + gamma * ce.
/// Null logits/labels drop the classification term (ce = 0 exactly).
LossBreakdown egc_loss_from_parts(const Tensor& score, const Tensor& target,
                                  const Tensor* logits,
                                  const std::vector<std::size_t>* labels,
                                  double gamma);

/// One training objective evaluation: noise x0 at step t, differentiate the
/// marginal log-density w.r.t. the noisy input (graph-building), and combine
/// the score-matching and classification terms.
LossBreakdown egc_loss(const EGCModel& model, const NoiseSchedule& ns,
                       const Tensor& x0, const std::vector<std::size_t>* labels,
                       std::size_t t, const Tensor& eps, const TrainConfig& cfg);

struct AdamState {
  std::vector<Tensor> m, v;  // aligned with the parameter list
  std::size_t step = 0;

  static AdamState init(const ParamList& params);
};

/// Standard Adam with bias correction and zero weight decay; returns the
/// updated parameters and advances the state in place.
ParamList adam_update(const ParamList& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8);

ParamList ema_update(const ParamList& ema_params, const ParamList& params,
                     double decay);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model_config;
  ParamList params;
  ParamList ema_params;
  ParamList adam_m, adam_v;  // optimizer moments, for exact resume
  NoiseSchedule schedule;
  std::uint64_t iteration = 0;
  std::string rng_state;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  EGCModel model() const { return EGCModel(model_config, params); }
  EGCModel ema_model() const { return EGCModel(model_config, ema_params); }
};

struct MetricRow {
  std::size_t iter;
  double recon, ce, loss, batch_acc;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> metrics;
};

using CheckpointSink = std::function<void(const Checkpoint&)>;

/// Run the training loop to cfg.total_iterations. A checkpoint passed in
/// `resume` continues an interrupted run, reproducing the uninterrupted
/// trajectory exactly. `sink`, when set, receives a checkpoint every
/// cfg.checkpoint_every iterations and at the end.
TrainResult train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg,
                       const Dataset& data,
                       const std::optional<Checkpoint>& resume = std::nullopt,
                       const CheckpointSink& sink = nullptr);

}  // namespace egc
