#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <torch/torch.h>

#include "efdiff/training.hpp"
#include "test_support.hpp"

using namespace efdiff;

namespace {

DenoiserConfig tiny_model(HeadMode head, Conditioning cond) {
  DenoiserConfig c;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.res_blocks = 1;
  c.attention_factors = {};
  c.heads = 2;
  c.norm_groups = 4;
  c.head = head;
  c.conditioning = cond;
  c.context_dim = 16;
  c.position_dim = 8;
  return c;
}

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.dim = 16;
  e.depth = 1;
  e.heads = 2;
  e.mlp_ratio = 2;
  return e;
}

struct World {
  std::vector<Scene> scenes;
  CropPolicy policy{32, 8};
  ResidualNormalizer normalizer;
  ViTEncoder encoder{nullptr};

  World() {
    SceneConfig sc;
    for (int i = 0; i < 4; ++i) scenes.push_back(generate_scene(10 + i, sc));
    normalizer = fit_dataset_normalizer(scenes, policy);
    encoder = make_encoder(tiny_encoder(), 3);
    encoder->freeze();
  }
  BatchBuilder builder(Conditioning c) const { return BatchBuilder(scenes, normalizer, policy, c, encoder); }
};

TrainSetup x0_setup(int iterations) {
  TrainSetup s;
  s.model = tiny_model(HeadMode::X0, Conditioning::EfmCrossAttention);
  s.train.formulation = HeadMode::X0;
  s.train.conditioning = Conditioning::EfmCrossAttention;
  s.train.iterations = iterations;
  s.train.batch = 2;
  s.train.learning_rate = 1e-3;
  s.train.checkpoint_every = 3;
  s.train.log_every = 1;
  s.train.seed = 5;
  s.shift = build_shift_schedule(15);
  s.dataset_digest = "test";
  return s;
}

bool same_maps(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end() || !torch::equal(v, it->second)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("gradient clipping") {
  auto p = torch::zeros({2}, torch::requires_grad());
  p.mutable_grad() = torch::tensor({3.0f, 4.0f});
  CHECK(global_grad_norm({p}) == doctest::Approx(5.0));
  CHECK(clip_grad_norm({p}, 1.0) == doctest::Approx(5.0));
  CHECK(p.grad()[0].item<double>() == doctest::Approx(0.6 / (1 + 1e-6 / 5)).epsilon(1e-6));
  CHECK(global_grad_norm({p}) == doctest::Approx(1.0).epsilon(1e-5));
  // Below the threshold nothing changes.
  p.mutable_grad() = torch::tensor({0.3f, 0.4f});
  clip_grad_norm({p}, 1.0);
  CHECK(p.grad()[1].item<float>() == 0.4f);
  // Parameters without gradients are skipped.
  auto q = torch::zeros({3}, torch::requires_grad());
  CHECK((global_grad_norm({p, q}) == doctest::Approx(0.5)));
}

TEST_CASE("EMA closed form and warmup") {
  auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  std::vector<torch::Tensor> raw{torch::full({3}, 2.0, f64)}, ema{torch::zeros({3}, f64)};
  const double d = 0.9;
  for (int k = 0; k < 20; ++k) ema_update(raw, ema, d);
  CHECK(std::abs(ema[0][0].item<double>() - 2.0 * (1.0 - std::pow(d, 20))) < 1e-10);
  CHECK(ema_effective_decay(0.9999, 0, true) == doctest::Approx(0.1));
  CHECK(ema_effective_decay(0.9999, 90, true) == doctest::Approx(91.0 / 100.0));
  CHECK(ema_effective_decay(0.9999, 10'000'000, true) == 0.9999);
  CHECK(ema_effective_decay(0.9999, 0, false) == 0.9999);
  std::vector<torch::Tensor> wrong{torch::zeros({2})};
  CHECK_THROWS(ema_update(raw, wrong, d));
}

TEST_CASE("Adam first step and state round trip") {
  auto p = torch::tensor({1.0f, -1.0f, 0.5f}).requires_grad_();
  p.mutable_grad() = torch::tensor({0.2f, -3.0f, 0.0f});
  Adam adam(0.01);
  adam.step({p});
  // After one step the bias-corrected ratio is g / (|g| + eps).
  CHECK(p[0].item<double>() == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(p[1].item<double>() == doctest::Approx(-1.0 + 0.01).epsilon(1e-6));
  CHECK(p[2].item<double>() == 0.5);

  TensorMap state;
  adam.save(state, {"p"});
  Adam other(0.01);
  other.load(state, {"p"}, adam.steps());
  auto p2 = p.detach().clone().requires_grad_();
  p.mutable_grad() = torch::tensor({1.0f, 1.0f, 1.0f});
  p2.mutable_grad() = torch::tensor({1.0f, 1.0f, 1.0f});
  adam.step({p});
  other.step({p2});
  CHECK(torch::equal(p.detach(), p2.detach()));
}

TEST_CASE("train config defaults, validation and digest") {
  CHECK(default_learning_rate(HeadMode::Epsilon) == 2e-5);
  CHECK(default_learning_rate(HeadMode::X0) == 5e-5);
  TrainConfig c;
  auto round = TrainConfig::from_json(c.to_json());
  CHECK(round.to_json() == c.to_json());
  auto longer = c;
  longer.iterations = 40'000;
  longer.log_every = 10;
  CHECK(longer.resume_digest() == c.resume_digest());
  auto other = c;
  other.learning_rate = 1e-4;
  CHECK(other.resume_digest() != c.resume_digest());
  other = c;
  other.batch = 0;
  CHECK_THROWS(other.validate());
}

TEST_CASE("batch builder") {
  World w;
  const auto b = w.builder(Conditioning::EfmCrossAttention);
  std::vector<Sample> samples;
  const auto batch = b.random_batch(3, 1, &samples);
  CHECK((batch.residual.sizes() == torch::IntArrayRef({3, 1, 32, 32})));
  CHECK((batch.reflectance.sizes() == torch::IntArrayRef({3, 6, 32, 32})));
  CHECK((batch.context.tokens.sizes() == torch::IntArrayRef({3, 16, 16})));
  CHECK(!batch.context.tokens.requires_grad());
  CHECK(torch::equal(b.random_batch(3, 1).residual, batch.residual));
  CHECK(!torch::equal(b.random_batch(3, 2).residual, batch.residual));
  REQUIRE(samples.size() == 3);
  CHECK(batch.residual[0][0][5][7].item<float>() == static_cast<float>(samples[0].residual_std(5, 7)));
  const double up = (samples[1].upsampled(3, 3) - w.normalizer.thermal_mean) / w.normalizer.thermal_std;
  CHECK(batch.upsampled[1][0][3][3].item<double>() == doctest::Approx(up).epsilon(1e-6));

  std::vector<Sample> centre;
  const auto cb = b.center_batch(0, 2, &centre);
  CHECK(cb.residual.size(0) == 2);
  CHECK(centre[0].top == 20);
  CHECK(centre[1].left == 20);

  const auto none = w.builder(Conditioning::None).random_batch(2, 1);
  CHECK(!none.context.tokens.defined());
  CHECK_THROWS(BatchBuilder(w.scenes, w.normalizer, w.policy, Conditioning::EfmCrossAttention, ViTEncoder(nullptr)));
}

TEST_CASE("regression head memorizes a fixed batch") {
  World w;
  const auto b = w.builder(Conditioning::ChannelConcat);
  const auto batch = b.center_batch(0, 2);
  auto net = make_denoiser(tiny_model(HeadMode::Regression, Conditioning::ChannelConcat), 1);
  std::vector<torch::Tensor> params = net->parameters();
  Adam adam(2e-3);
  double first = 0, last = 0;
  for (int step = 0; step < 200; ++step) {
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    auto loss = loss_regression(net, batch);
    if (step == 0) first = loss.item<double>();
    last = loss.item<double>();
    loss.backward();
    clip_grad_norm(params, 1.0);
    adam.step(params);
  }
  MESSAGE("L1 " << first << " -> " << last);
  CHECK(last < 0.5 * first);
}

TEST_CASE("x0 training run: loss falls, checkpoints, determinism") {
  World w;
  const auto data = w.builder(Conditioning::EfmCrossAttention);
  TempDir a("train_a"), b("train_b");
  auto setup = x0_setup(60);
  setup.train.checkpoint_every = 30;
  setup.train.log_every = 10;
  const auto r = train(setup, data, w.encoder, a.str());
  REQUIRE(r.losses.size() == 60);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += r.losses[i];
    last += r.losses[50 + i];
  }
  MESSAGE("x0 loss " << first / 10 << " -> " << last / 10);
  CHECK(last < first);
  CHECK(r.encoder_checksum_after == r.encoder_checksum_before);

  const auto ck = load_checkpoint(a / "checkpoint.bin");
  CHECK(ck.iteration() == 60);
  CHECK(ck.manifest.at("adam_steps").get<int>() == 60);
  std::ifstream csv(a / "loss.csv");
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 6);

  const auto r2 = train(setup, data, w.encoder, b.str());
  CHECK(r2.losses == r.losses);
  const auto ck2 = load_checkpoint(b / "checkpoint.bin");
  CHECK(same_maps(ck.params, ck2.params));
  CHECK(same_maps(ck.ema, ck2.ema));

  auto ema_net = load_denoiser(a / "checkpoint.bin");
  auto raw_net = load_denoiser(a / "checkpoint.bin", false);
  const auto batch = data.center_batch(0, 2);
  CHECK(std::isfinite(evaluate_loss(ema_net, setup, batch, 1)));
  // save -> load -> evaluate reproduces the loss bit for bit.
  save_checkpoint(b / "copy.bin", load_checkpoint(a / "checkpoint.bin"));
  auto copy_net = load_denoiser(b / "copy.bin", false);
  CHECK(evaluate_loss(raw_net, setup, batch, 1) == evaluate_loss(copy_net, setup, batch, 1));
  auto copy_ema = load_denoiser(b / "copy.bin");
  CHECK(evaluate_loss(ema_net, setup, batch, 1) == evaluate_loss(copy_ema, setup, batch, 1));
}

TEST_CASE("resume equals an uninterrupted run") {
  World w;
  const auto data = w.builder(Conditioning::EfmCrossAttention);
  TempDir full("resume_full"), split("resume_split");
  const auto setup = x0_setup(7);
  train(setup, data, w.encoder, full.str());
  const auto part = train(setup, data, w.encoder, split.str(), false, 4);
  CHECK(part.final_iteration == 4);
  CHECK(load_checkpoint(split / "checkpoint.bin").iteration() == 4);
  const auto rest = train(setup, data, w.encoder, split.str(), true);
  CHECK(rest.first_iteration == 4);
  CHECK(rest.losses.size() == 3);
  const auto a = load_checkpoint(full / "checkpoint.bin"), b = load_checkpoint(split / "checkpoint.bin");
  CHECK(same_maps(a.params, b.params));
  CHECK(same_maps(a.ema, b.ema));
  CHECK(same_maps(a.adam_m, b.adam_m));
  CHECK(same_maps(a.adam_v, b.adam_v));

  auto changed = setup;
  changed.train.learning_rate = 2e-3;
  CHECK_THROWS(train(changed, data, w.encoder, split.str(), true));
  // A longer run with the same digest resumes.
  auto longer = setup;
  longer.train.iterations = 9;
  CHECK(train(longer, data, w.encoder, split.str(), true).first_iteration == 7);
}

TEST_CASE("train rejects inconsistent setups") {
  World w;
  const auto data = w.builder(Conditioning::EfmCrossAttention);
  TempDir d("train_bad");
  auto s = x0_setup(2);
  s.model.head = HeadMode::Epsilon;
  CHECK_THROWS(train(s, data, w.encoder, d.str()));
  s = x0_setup(2);
  s.shift.reset();
  CHECK_THROWS(train(s, data, w.encoder, d.str()));
  s = x0_setup(2);
  auto unfrozen = make_encoder(tiny_encoder(), 3);
  CHECK_THROWS(train(s, data, unfrozen, d.str()));
}
