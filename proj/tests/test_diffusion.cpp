#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <cmath>

#include <torch/torch.h>

#include "efdiff/diffusion.hpp"

using namespace efdiff;

namespace {

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

// Noise predictor consistent with a fixed clean field: inverting the forward
// map at any state returns exactly `clean`.
ModelFn eps_oracle(const torch::Tensor& clean, const VPSchedule& s) {
  return ModelFn([clean, &s](const torch::Tensor& x, const torch::Tensor& t) {
    const double a = s.alpha_bar_at(t[0].item<int>());
    return ((x.to(torch::kFloat64) - std::sqrt(a) * clean.to(torch::kFloat64)) / std::sqrt(1.0 - a))
        .to(torch::kFloat32);
  });
}

torch::Tensor target_field() {
  auto g = make_generator(99);
  return torch::randn({2, 1, 8, 8}, g, torch::kFloat32).to(torch::kFloat64);
}

}  // namespace

TEST_CASE("vp forward closed form") {
  const auto s = build_vp_schedule(1000);
  auto g = make_generator(1);
  auto x0 = torch::randn({3, 1, 4, 4}, g), eps = torch::randn({3, 1, 4, 4}, g);
  auto t = torch::tensor({1, 500, 1000}, torch::kInt64);
  const auto xt = vp_forward(x0, t, eps, s);
  for (int i = 0; i < 3; ++i) {
    const double a = s.alpha_bar_at(t[i].item<int>());
    CHECK(max_abs(xt[i] - (std::sqrt(a) * x0[i] + std::sqrt(1 - a) * eps[i])) < 1e-6);
    CHECK(max_abs(vp_forward(x0[i], t[i].item<int>(), eps[i], s) - xt[i]) < 1e-6);
  }
  CHECK_THROWS(vp_forward(x0, torch::tensor({0, 1, 2}, torch::kInt64), eps, s));
  CHECK_THROWS(vp_forward(x0, 1001, eps, s));
}

TEST_CASE("shift forward closed form") {
  const auto s = build_shift_schedule(15, 2.0);
  auto g = make_generator(2);
  auto x0 = torch::randn({2, 1, 4, 4}, g), eps = torch::randn({2, 1, 4, 4}, g);
  auto t = torch::tensor({1, 15}, torch::kInt64);
  const auto xt = shift_forward(x0, t, eps, s);
  for (int i = 0; i < 2; ++i) {
    const double e = s.eta_at(t[i].item<int>());
    CHECK(max_abs(xt[i] - ((1 - e) * x0[i] + 2.0 * std::sqrt(e) * eps[i])) < 1e-6);
  }
}

TEST_CASE("vp forward is variance preserving over 1e6 pixels") {
  const auto s = build_vp_schedule(1000);
  auto g = make_generator(3);
  auto x0 = torch::randn({1000, 1, 32, 32}, g).to(torch::kFloat64);
  auto eps = torch::randn({1000, 1, 32, 32}, g).to(torch::kFloat64);
  for (int t : {1, 250, 1000}) {
    const auto xt = vp_forward(x0, t, eps, s);
    CHECK(xt.var().item<double>() == doctest::Approx(1.0).epsilon(0.01));
    // Pure-noise component alone has variance 1 - alpha_bar.
    const auto noise_only = vp_forward(torch::zeros_like(x0), t, eps, s);
    CHECK(noise_only.var().item<double>() == doctest::Approx(1.0 - s.alpha_bar_at(t)).epsilon(0.01));
  }
}

TEST_CASE("noise draws are seeded and in range") {
  auto like = torch::zeros({500, 1, 2, 2});
  const auto a = draw_noise(like, 15, 7), b = draw_noise(like, 15, 7), c = draw_noise(like, 15, 8);
  CHECK(torch::equal(a.timesteps, b.timesteps));
  CHECK(torch::equal(a.noise, b.noise));
  CHECK(!torch::equal(a.noise, c.noise));
  CHECK(a.timesteps.min().item<int>() == 1);
  CHECK(a.timesteps.max().item<int>() == 15);
}

TEST_CASE("ddim with a consistent oracle returns the target") {
  const auto s = build_vp_schedule(1000);
  const auto clean = target_field();
  for (int n : {1, 10, 50}) {
    const auto out = sample_ddim(eps_oracle(clean, s), {2, 1, 8, 8}, s, n, 5);
    const double err = max_abs(out.to(torch::kFloat64) - clean);
    MESSAGE("steps " << n << " max abs error " << err);
    CHECK(err < 1e-5);
  }
  // Deterministic given the seed; different seeds still land on the target.
  CHECK(torch::equal(sample_ddim(eps_oracle(clean, s), {2, 1, 8, 8}, s, 10, 5),
                     sample_ddim(eps_oracle(clean, s), {2, 1, 8, 8}, s, 10, 5)));
}

TEST_CASE("ddim visits the subsequence from T downwards") {
  const auto s = build_vp_schedule(1000);
  std::vector<int> seen;
  ModelFn record([&](const torch::Tensor& x, const torch::Tensor& t) {
    seen.push_back(t[0].item<int>());
    return torch::zeros_like(x);
  });
  sample_ddim(record, {1, 1, 2, 2}, s, 4, 0);
  CHECK((seen == std::vector<int>{1000, 750, 500, 250}));
}

TEST_CASE("ddpm with a consistent oracle returns the target") {
  const auto s = build_vp_schedule(200);
  const auto clean = target_field();
  const auto out = sample_ddpm(eps_oracle(clean, s), {2, 1, 8, 8}, s, 3);
  CHECK(max_abs(out.to(torch::kFloat64) - clean) < 1e-4);
}

TEST_CASE("ddpm Monte Carlo recovers a Gaussian data distribution") {
  // For data N(0, v) per pixel the optimal noise predictor is linear:
  // E[eps | x_t] = sqrt(1 - a) x_t / (a v + 1 - a).
  const double v = 0.25;
  const auto s = build_vp_schedule(1000);
  ModelFn opt([&](const torch::Tensor& x, const torch::Tensor& t) {
    const double a = s.alpha_bar_at(t[0].item<int>());
    return x * (std::sqrt(1 - a) / (a * v + 1 - a));
  });
  std::vector<torch::Tensor> draws;
  for (std::uint64_t seed = 0; seed < 64; ++seed) draws.push_back(sample_ddpm(opt, {1, 1, 32, 32}, s, seed));
  const auto all = torch::cat(draws).to(torch::kFloat64);
  const double mean = all.mean().item<double>(), var = all.var().item<double>();
  MESSAGE("mean " << mean << " var " << var);
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == doctest::Approx(v).epsilon(0.05));
}

TEST_CASE("shift sampler with an exact clean-residual oracle") {
  const double kappa = 1.0;
  const auto s = build_shift_schedule(15, kappa);
  const auto clean = target_field().to(torch::kFloat32);
  ModelFn fixed([&](const torch::Tensor& x, const torch::Tensor&) { return clean.expand_as(x); });
  const auto out = sample_shift(fixed, {2, 1, 8, 8}, s, 15, 11);
  CHECK(max_abs(out - clean) <= kappa * std::sqrt(s.eta_at(1)));

  // The state handed to the model at t = 1 follows the forward marginal:
  // mean (1 - eta_1) x0 and standard deviation kappa sqrt(eta_1).
  std::vector<torch::Tensor> states;
  const auto big = torch::randn({64, 1, 16, 16}, make_generator(4));
  ModelFn watch([&](const torch::Tensor& x, const torch::Tensor& t) {
    if (t[0].item<int>() == 1) states.push_back(x.clone());
    return big;
  });
  sample_shift(watch, {64, 1, 16, 16}, s, 15, 12);
  REQUIRE(states.size() == 1);
  const auto dev = (states[0] - (1 - s.eta_at(1)) * big).to(torch::kFloat64);
  CHECK(std::abs(dev.mean().item<double>()) < 0.01);
  CHECK(dev.std().item<double>() == doctest::Approx(kappa * std::sqrt(s.eta_at(1))).epsilon(0.03));
}

TEST_CASE("shift sampler step subsets") {
  const auto s = build_shift_schedule(15);
  std::vector<int> seen;
  ModelFn record([&](const torch::Tensor& x, const torch::Tensor& t) {
    seen.push_back(t[0].item<int>());
    return torch::zeros_like(x);
  });
  sample_shift(record, {1, 1, 2, 2}, s, 5, 0);
  CHECK((seen == std::vector<int>{15, 12, 9, 6, 3}));
  seen.clear();
  const auto one = sample_shift(record, {1, 1, 2, 2}, s, 1, 0);
  CHECK(seen == std::vector<int>{15});
  CHECK(max_abs(one) == 0.0);
}

TEST_CASE("losses") {
  const auto vp = build_vp_schedule(100);
  const auto sh = build_shift_schedule(15);
  auto clean = torch::randn({4, 1, 8, 8}, make_generator(5));
  const auto d_vp = draw_noise(clean, 100, 1), d_sh = draw_noise(clean, 15, 1);

  // A model that reads off the drawn noise gives zero loss.
  ModelFn cheat_eps([&](const torch::Tensor&, const torch::Tensor&) { return d_vp.noise; });
  CHECK(loss_eps(cheat_eps, clean, vp, d_vp).item<double>() == 0.0);
  ModelFn zero([](const torch::Tensor& x, const torch::Tensor&) { return torch::zeros_like(x); });
  CHECK(loss_eps(zero, clean, vp, d_vp).item<double>() == doctest::Approx(d_vp.noise.abs().mean().item<double>()));
  CHECK(loss_x0(zero, clean, sh, d_sh).item<double>() == doctest::Approx(clean.pow(2).mean().item<double>()));
  ModelFn cheat_x0([&](const torch::Tensor&, const torch::Tensor&) { return clean; });
  CHECK(loss_x0(cheat_x0, clean, sh, d_sh).item<double>() == 0.0);

  // Per-sample timesteps are passed through unchanged.
  ModelFn check_t([&](const torch::Tensor& x, const torch::Tensor& t) {
    CHECK(torch::equal(t, d_vp.timesteps));
    return torch::zeros_like(x);
  });
  loss_eps(check_t, clean, vp, d_vp);
}

TEST_CASE("head-mode checks on bound denoisers") {
  DenoiserConfig c;
  c.base_channels = 8;
  c.channel_mult = {1};
  c.res_blocks = 1;
  c.attention_factors = {};
  c.heads = 2;
  c.norm_groups = 4;
  c.head = HeadMode::X0;
  c.conditioning = Conditioning::None;
  auto net = make_denoiser(c, 1);
  ConditionedBatch b;
  b.residual = torch::randn({2, 1, 8, 8});
  b.upsampled = torch::randn({2, 1, 8, 8});
  const auto vp = build_vp_schedule(10);
  const auto sh = build_shift_schedule(15);
  CHECK_THROWS(loss_eps(net, b, vp, draw_noise(b.residual, 10, 0)));
  CHECK_THROWS(sample_ddim(net, b, vp, 2, 0));
  CHECK_THROWS(predict_regression(net, b));
  CHECK_NOTHROW(loss_x0(net, b, sh, draw_noise(b.residual, 15, 0)));
  const auto a1 = sample_shift(net, b, sh, 15, 3), a2 = sample_shift(net, b, sh, 15, 3);
  CHECK(torch::equal(a1, a2));
}

TEST_CASE("reconstruction adds the unstandardized residual") {
  ResidualNormalizer n;
  n.mu = 0.5;
  n.sigma = 2.0;
  Field up(2, 2, 10.0), r(2, 2, 1.0);
  const auto y = reconstruct(up, r, n);
  for (double v : y.values()) CHECK(v == doctest::Approx(10.0 + 0.5 + 6.0));
}
