#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "egc/dataset.hpp"
#include "egc/random.hpp"
#include "egc/train.hpp"

using namespace egc;

namespace {

ModelConfig tiny_mlp(std::size_t classes = 2) {
  ModelConfig mc;
  mc.arch = ModelConfig::Arch::mlp;
  mc.input_dim = 2;
  mc.hidden = 16;
  mc.hidden_layers = 2;
  mc.temb_dim = 8;
  mc.temb_hidden = 8;
  mc.num_classes = classes;
  return mc;
}

TrainConfig tiny_train(std::size_t iters = 20) {
  TrainConfig tc;
  tc.batch_size = 16;
  tc.total_iterations = iters;
  tc.T = 10;
  tc.learning_rate = 1e-3;
  tc.metrics_every = 5;
  tc.checkpoint_every = 0;
  return tc;
}

bool params_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return false;
    if (a[i].second.data() != b[i].second.data()) return false;
  }
  return true;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("loss formula on synthetic parts") {
  // exact score and a saturated correct logit drive the loss to zero
  Tensor eps = Tensor::from_data({2, 2}, {0.5, -1.0, 0.25, 2.0});
  Tensor score = neg(eps);
  Tensor logits = Tensor::from_data({2, 2}, {1000.0, 0.0, 1000.0, 0.0});
  std::vector<std::size_t> labels{0, 0};
  auto lb = egc_loss_from_parts(score, neg(eps), &logits, &labels, 0.5);
  CHECK(lb.recon == 0.0);
  CHECK(lb.ce == 0.0);
  CHECK(lb.loss.item() == 0.0);

  // decomposition holds exactly
  RandomEngine rng(2);
  Tensor s2 = rng.normal_tensor({4, 3});
  Tensor t2 = rng.normal_tensor({4, 3});
  Tensor f2 = rng.uniform_tensor({4, 5}, -2.0, 2.0);
  std::vector<std::size_t> y2{0, 4, 2, 1};
  auto full = egc_loss_from_parts(s2, t2, &f2, &y2, 0.125);
  CHECK(full.loss.item() == full.recon + 0.125 * full.ce);

  // gamma = 0 keeps only the reconstruction term
  auto recon_only = egc_loss_from_parts(s2, t2, &f2, &y2, 0.0);
  CHECK(recon_only.loss.item() == recon_only.recon);

  // dropping labels zeroes the classification term
  auto unl = egc_loss_from_parts(s2, t2, nullptr, nullptr, 0.5);
  CHECK(unl.ce == 0.0);
  CHECK(unl.loss.item() == unl.recon);

  std::vector<std::size_t> bad{0, 9, 0, 0};
  CHECK_THROWS(egc_loss_from_parts(s2, t2, &f2, &bad, 0.5));
}

TEST_CASE("parameter gradient of the loss matches finite differences") {
  // tiny model, full double-backward path through the score
  ModelConfig mc = tiny_mlp();
  mc.hidden = 6;
  mc.hidden_layers = 1;
  mc.temb_dim = 4;
  mc.temb_hidden = 4;
  EGCModel model(mc, 3);
  RandomEngine rng(17);
  ParamList params;
  for (const auto& [name, p] : model.params()) {
    params.emplace_back(name,
                        Tensor::from_data(p.shape(),
                                          rng.uniform_tensor(p.shape(), -0.6, 0.6)
                                              .data(),
                                          true));
  }
  model.set_params(std::move(params));

  NoiseSchedule ns = NoiseSchedule::linear(10);
  TrainConfig tc;
  tc.gamma = 0.3;
  Tensor x0 = rng.uniform_tensor({3, 2}, -1.0, 1.0);
  Tensor eps = rng.normal_tensor({3, 2});
  std::vector<std::size_t> labels{0, 1, 1};
  const std::size_t t = 4;

  auto loss_value = [&](const EGCModel& m) {
    return egc_loss(m, ns, x0, &labels, t, eps, tc).loss.item();
  };

  auto lb = egc_loss(model, ns, x0, &labels, t, eps, tc);
  std::vector<Tensor> targets;
  for (const auto& [n, p] : model.params()) targets.push_back(p);
  GradientMap gm = backward(lb.loss, false, targets);

  const double h = 1e-5;
  RandomEngine pick(5);
  for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
    const auto& [name, p] = model.params()[pi];
    Tensor analytic = gm.get_or_zeros(p);
    // probe a few coordinates per parameter
    for (int probe = 0; probe < 3; ++probe) {
      const std::size_t j = pick.uniform_int(p.size());
      auto shift = [&](double delta) {
        ParamList shifted;
        for (std::size_t q = 0; q < model.params().size(); ++q) {
          const auto& [n2, p2] = model.params()[q];
          if (q == pi) {
            std::vector<double> d = p2.data();
            d[j] += delta;
            shifted.emplace_back(n2, Tensor::from_data(p2.shape(), d, true));
          } else {
            shifted.emplace_back(n2, p2);
          }
        }
        return loss_value(model.with_params(std::move(shifted)));
      };
      const double numeric = (shift(h) - shift(-h)) / (2.0 * h);
      const double a = analytic.at(j);
      CHECK(std::abs(a - numeric) /
                std::max({std::abs(a), std::abs(numeric), 1e-2}) < 1e-4);
    }
  }
}

TEST_CASE("adam single step against hand arithmetic") {
  ParamList params;
  params.emplace_back("w", Tensor::from_data({2}, {1.0, -2.0}, true));
  AdamState st = AdamState::init(params);
  std::vector<Tensor> grads{Tensor::from_data({2}, {0.5, -0.1})};

  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParamList next = adam_update(params, grads, st, lr, b1, b2, eps);

  // first step: mhat = g, vhat = g^2, update = -lr * g / (|g| + eps)
  for (std::size_t j = 0; j < 2; ++j) {
    const double g = grads[0].at(j);
    const double expect = params[0].second.at(j) -
                          lr * g / (std::sqrt(g * g) + eps);
    CHECK(next[0].second.at(j) == doctest::Approx(expect).epsilon(1e-12));
  }

  // zero gradient leaves parameters unchanged
  ParamList zp;
  zp.emplace_back("w", Tensor::from_data({2}, {0.3, 0.4}, true));
  AdamState zst = AdamState::init(zp);
  std::vector<Tensor> zg{Tensor::zeros({2})};
  ParamList znext = adam_update(zp, zg, zst, lr);
  CHECK(znext[0].second.data() == zp[0].second.data());
}

TEST_CASE("ema update") {
  ParamList ema, cur;
  ema.emplace_back("w", Tensor::from_data({2}, {1.0, 2.0}));
  cur.emplace_back("w", Tensor::from_data({2}, {3.0, 6.0}, true));

  ParamList copy = ema_update(ema, cur, 0.0);
  CHECK(copy[0].second.data() == cur[0].second.data());

  ParamList same = ema_update(cur, cur, 0.5);
  CHECK(same[0].second.data() == cur[0].second.data());

  ParamList step = ema_update(ema, cur, 0.75);
  CHECK(step[0].second.at(0) == doctest::Approx(0.75 * 1.0 + 0.25 * 3.0));
  CHECK(step[0].second.at(1) == doctest::Approx(0.75 * 2.0 + 0.25 * 6.0));

  CHECK_THROWS(ema_update(ema, cur, 1.0));
}

TEST_CASE("training runs deterministically") {
  DatasetSpec spec;
  spec.size = 64;
  Dataset data = gen_dataset(spec, 1);

  TrainResult a = train_loop(tiny_mlp(), tiny_train(), data);
  TrainResult b = train_loop(tiny_mlp(), tiny_train(), data);
  CHECK(params_equal(a.checkpoint.params, b.checkpoint.params));
  CHECK(params_equal(a.checkpoint.ema_params, b.checkpoint.ema_params));
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].loss == b.metrics[i].loss);
  }
}

TEST_CASE("supervised gamma=0 equals unsupervised trajectory") {
  DatasetSpec spec;
  spec.size = 64;
  Dataset data = gen_dataset(spec, 3);

  TrainConfig sup = tiny_train();
  sup.gamma = 0.0;
  TrainConfig unsup = tiny_train();
  unsup.mode = TrainConfig::Mode::unsupervised;

  TrainResult a = train_loop(tiny_mlp(), sup, data);
  TrainResult b = train_loop(tiny_mlp(), unsup, data);
  CHECK(params_equal(a.checkpoint.params, b.checkpoint.params));
}

TEST_CASE("checkpoint round trip is bitwise and resume matches straight run") {
  DatasetSpec spec;
  spec.size = 64;
  Dataset data = gen_dataset(spec, 7);

  TrainConfig tc = tiny_train(12);
  tc.checkpoint_every = 6;

  std::vector<Checkpoint> snaps;
  CheckpointSink sink = [&](const Checkpoint& ck) { snaps.push_back(ck); };
  TrainResult full = train_loop(tiny_mlp(), tc, data, std::nullopt, sink);
  REQUIRE(snaps.size() >= 2);
  const Checkpoint& mid = snaps.front();
  CHECK(mid.iteration == 6);

  const std::string path = temp_path("egc_test_ckpt.egc");
  mid.save(path);
  Checkpoint loaded = Checkpoint::load(path);
  CHECK(params_equal(loaded.params, mid.params));
  CHECK(params_equal(loaded.ema_params, mid.ema_params));
  CHECK(loaded.rng_state == mid.rng_state);
  CHECK(loaded.iteration == mid.iteration);
  CHECK(loaded.schedule.beta == mid.schedule.beta);

  TrainResult resumed = train_loop(tiny_mlp(), tc, data, loaded);
  CHECK(params_equal(resumed.checkpoint.params, full.checkpoint.params));
  CHECK(params_equal(resumed.checkpoint.ema_params, full.checkpoint.ema_params));
  CHECK(resumed.checkpoint.rng_state == full.checkpoint.rng_state);
  std::filesystem::remove(path);
}

TEST_CASE("zero iterations returns the initialization") {
  DatasetSpec spec;
  spec.size = 16;
  Dataset data = gen_dataset(spec, 7);
  TrainConfig tc = tiny_train(0);

  TrainResult r = train_loop(tiny_mlp(), tc, data);
  ModelConfig mc = tiny_mlp();
  mc.t_max = tc.T;
  EGCModel fresh(mc, tc.seed);
  CHECK(params_equal(r.checkpoint.params, fresh.params()));
  CHECK(r.metrics.empty());
}

TEST_CASE("corrupt checkpoints are rejected with the file named") {
  const std::string path = temp_path("egc_bad_ckpt.egc");
  {
    FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("NOTACKPT", f);
    std::fclose(f);
  }
  bool named = false;
  try {
    Checkpoint::load(path);
  } catch (const std::exception& e) {
    named = std::strstr(e.what(), path.c_str()) != nullptr;
  }
  CHECK(named);
  std::filesystem::remove(path);
  CHECK_THROWS(Checkpoint::load(temp_path("egc_missing.egc")));
}

TEST_CASE("discriminative mode trains a plain classifier") {
  DatasetSpec spec;
  spec.size = 128;
  spec.noise = 0.05;
  Dataset data = gen_dataset(spec, 5);

  TrainConfig tc = tiny_train(150);
  tc.mode = TrainConfig::Mode::discriminative;
  tc.learning_rate = 3e-3;
  TrainResult r = train_loop(tiny_mlp(), tc, data);
  REQUIRE(!r.metrics.empty());
  CHECK(r.metrics.back().recon == 0.0);
  CHECK(r.metrics.back().batch_acc > 0.8);
}

TEST_SUITE_END();
