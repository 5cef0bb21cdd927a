// Property checks that run in minutes on a laptop CPU: schedules,
// degradation, sampler exactness, gradients, attention, diagnostics and
// reproducibility of the command pipeline.
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>

#include <torch/torch.h>

#include "acceptance_common.hpp"
#include "efdiff/degrade.hpp"
#include "efdiff/diffusion.hpp"
#include "efdiff/experiment.hpp"
#include "efdiff/metrics.hpp"
#include "efdiff/schedules.hpp"
#include "efdiff/synthdata.hpp"
#include "test_support.hpp"

using namespace efdiff;

namespace {

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

Outcome schedules() {
  Checklist c;
  const int T = 1000;
  const auto vp = build_vp_schedule(T, 1e-6, 1e-2);
  c.add(vp.beta.front() == 1e-6 && std::abs(vp.beta.back() - 1e-2) < 1e-15, "beta endpoints 1e-6 / 1e-2");
  bool mono = true;
  double rec = 0.0, prod_err = 0.0, prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    mono &= vp.alpha_bar_at(t) < vp.alpha_bar_at(t - 1);
    rec = std::max(rec, std::abs(vp.alpha_bar_at(t) - vp.alpha_bar_at(t - 1) * (1.0 - vp.beta_at(t))));
    // Independent oracle: explicit product of the linear rates.
    prod *= 1.0 - (1e-6 + (1e-2 - 1e-6) * (t - 1) / (T - 1));
    prod_err = std::max(prod_err, std::abs(prod - vp.alpha_bar_at(t)) / prod);
  }
  c.add(mono, "alpha_bar strictly decreasing");
  c.add(rec < 1e-12, "recurrence residual " + fmt(rec));
  c.add(prod_err < 1e-12, "product oracle rel err " + fmt(prod_err));
  const double aT = vp.alpha_bar_at(T);
  c.add(std::abs(aT - 0.0067) <= 0.1 * 0.0067, "alpha_bar_T " + fmt(aT));
  const auto sh = build_shift_schedule(15);
  const double ratio = std::pow(kDefaultSqrtEtaMax / kDefaultSqrtEtaMin, 1.0 / 14.0);
  double ratio_err = 0.0;
  for (int t = 1; t < 15; ++t)
    ratio_err = std::max(ratio_err, std::abs(std::sqrt(sh.eta_at(t + 1) / sh.eta_at(t)) - ratio));
  c.add(ratio_err < 1e-10 && std::abs(std::sqrt(sh.eta_at(1)) - kDefaultSqrtEtaMin) < 1e-12 &&
            std::abs(std::sqrt(sh.eta_at(15)) - kDefaultSqrtEtaMax) < 1e-12,
        "shift geometric ratio err " + fmt(ratio_err));
  return c.done();
}

Outcome degradation() {
  Checklist c;
  const Field flat(64, 64, 23.5);
  const auto d = wald_degrade(flat, 8);
  double fixed = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) fixed = std::max(fixed, std::abs(d.upsampled.values()[i] - 23.5));
  for (double v : d.coarse.values()) fixed = std::max(fixed, std::abs(v - 23.5));
  c.add(fixed == 0.0, "constant fixed point err " + fmt(fixed));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(20.0, 5.0);
  Field f(64, 64);
  for (auto& v : f.values()) v = n(rng);
  const auto blocks = block_average(f, 8);
  double cons = std::abs(blocks.mean() - f.mean());
  for (int br = 0; br < 8; ++br)
    for (int bc = 0; bc < 8; ++bc) {
      double s = 0;
      for (int r = 0; r < 8; ++r)
        for (int col = 0; col < 8; ++col) s += f(br * 8 + r, bc * 8 + col);
      cons = std::max(cons, std::abs(s / 64 - blocks(br, bc)));
    }
  c.add(cons < 1e-10, "block-mean conservation " + fmt(cons));

  ResidualNormalizer norm;
  norm.mu = 0.3;
  norm.sigma = 1.7;
  const auto r = make_residual(f, wald_degrade(f, 8).upsampled);
  const auto z = norm.standardize(r);
  Field z32 = z;
  for (auto& v : z32.values()) v = static_cast<float>(v);
  const auto back = norm.unstandardize(z32);
  double rt = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) rt = std::max(rt, std::abs(back.values()[i] - r.values()[i]) / norm.sigma);
  c.add(rt < 1e-6, "standardize round trip (float32 storage) " + fmt(rt));

  const auto g = make_grid(224, 224, 32);
  const auto big = wald_degrade(Field(224, 224, 1.0), 32);
  c.add(g.coarse_height == 7 && g.coarse_width == 7 && big.coarse.height() == 7 && big.coarse.width() == 7,
        "224 / s=32 -> " + std::to_string(big.coarse.height()) + "x" + std::to_string(big.coarse.width()));
  return c.done();
}

Outcome oracle_samplers() {
  Checklist c;
  const auto vp = build_vp_schedule(1000);
  const auto clean = torch::randn({4, 1, 16, 16}, make_generator(3));
  ModelFn eps([&](const torch::Tensor& x, const torch::Tensor& t) {
    const double a = vp.alpha_bar_at(t[0].item<int>());
    return ((x.to(torch::kFloat64) - std::sqrt(a) * clean.to(torch::kFloat64)) / std::sqrt(1.0 - a)).to(torch::kFloat32);
  });
  for (int n : {1, 10, 50}) {
    const double err = max_abs(sample_ddim(eps, clean.sizes(), vp, n, 17) - clean);
    c.add(err < 1e-5, "ddim " + std::to_string(n) + " steps max err " + fmt(err));
  }
  const auto sh = build_shift_schedule(15);
  ModelFn x0([&](const torch::Tensor&, const torch::Tensor&) { return clean; });
  const double bound = sh.kappa * std::sqrt(sh.eta_at(1));
  const double err = max_abs(sample_shift(x0, clean.sizes(), sh, 15, 17) - clean);
  c.add(err <= bound, "shift max err " + fmt(err) + " <= kappa sqrt(eta_1) = " + fmt(bound));
  return c.done();
}

DenoiserConfig gradient_model() {
  DenoiserConfig m;
  m.base_channels = 8;
  m.channel_mult = {1};
  m.res_blocks = 1;
  m.attention_factors = {};
  m.heads = 2;
  m.norm_groups = 4;
  m.head = HeadMode::X0;
  m.conditioning = Conditioning::EfmCrossAttention;
  m.context_dim = 8;
  m.position_dim = 8;
  return m;
}

Outcome gradients() {
  Checklist c;
  const auto cfg = gradient_model();
  auto net = make_denoiser(cfg, 21);
  auto ref = make_denoiser(cfg, 21);
  ref->to(torch::kFloat64);
  c.add(net->cross_attention_sites() == 1, "cross-attention sites " + std::to_string(net->cross_attention_sites()));

  auto g = make_generator(5);
  const auto state = torch::randn({2, 1, 8, 8}, g), up = torch::randn({2, 1, 8, 8}, g);
  const auto target = torch::randn({2, 1, 8, 8}, g);
  const auto tokens = torch::randn({2, 4, 8}, g);
  const auto t = torch::tensor({3, 11}, torch::kInt64);
  auto loss_of = [&](Denoiser& d, torch::ScalarType dt) {
    EmbeddingSet z{tokens.to(dt), 2, 2};
    DenoiserInput in{state.to(dt), up.to(dt), {}, &z, t};
    return (d->forward(in) - target.to(dt)).pow(2).mean();
  };
  loss_of(net, torch::kFloat32).backward();

  auto fparams = net->named_parameters();
  auto dparams = ref->named_parameters();
  torch::NoGradGuard no_grad;
  const double h = 1e-6;
  auto central = [&](const std::function<void(double)>& shift) {
    shift(h);
    const double up_l = loss_of(ref, torch::kFloat64).item<double>();
    shift(-2 * h);
    const double dn_l = loss_of(ref, torch::kFloat64).item<double>();
    shift(h);
    return (up_l - dn_l) / (2 * h);
  };

  double worst = 0.0;
  // Random directions through the full parameter vector.
  for (int k = 0; k < 4; ++k) {
    std::vector<torch::Tensor> dirs;
    double analytic = 0.0;
    for (const auto& item : fparams) {
      auto v = torch::randn(item.value().sizes(), make_generator(100 + k * 1000 + dirs.size()), torch::kFloat64);
      if (item.value().grad().defined())
        analytic += (item.value().grad().to(torch::kFloat64) * v).sum().item<double>();
      dirs.push_back(v);
    }
    const double numeric = central([&](double s) {
      std::size_t i = 0;
      for (auto& item : dparams) item.value().add_(dirs[i++], s);
    });
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
  }
  const double dir_err = worst;
  // Single coordinates with the largest gradients inside the cross-attention site.
  int coords = 0;
  worst = 0.0;
  for (const auto& item : fparams) {
    if (item.key().find("mid_cross") == std::string::npos || !item.value().grad().defined()) continue;
    const auto grad = item.value().grad().flatten();
    const auto idx = grad.abs().argmax().item<std::int64_t>();
    const double analytic = grad[idx].item<double>();
    if (std::abs(analytic) < 1e-6) continue;
    auto& p = dparams[item.key()];
    const double numeric = central([&](double s) { p.view(-1)[idx] += s; });
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
    ++coords;
  }
  c.add(dir_err < 1e-3, "directional rel err " + fmt(dir_err));
  c.add(coords >= 8 && worst < 1e-3,
        "cross-attention coordinate rel err " + fmt(worst) + " over " + std::to_string(coords) + " tensors");
  return c.done();
}

Outcome attention_contract() {
  Checklist c;
  auto q = torch::ones({1, 1, 1});
  auto k = torch::tensor({0.0f, static_cast<float>(std::log(3.0))}).reshape({1, 2, 1});
  auto v = torch::tensor({0.0f, 1.0f}).reshape({1, 2, 1});
  const auto hand = multi_head_attention(q, k, v, 1, true);
  const double w0 = hand.weights[0][0][0][0].item<double>(), out = hand.values.item<double>();
  c.add(std::abs(w0 - 0.25) < 1e-6 && std::abs(out - 0.75) < 1e-6, "hand example -> " + fmt(out, 7));

  torch::manual_seed(1);
  CrossAttention2d xa(16, 12, 4, 0);
  auto f = torch::randn({2, 16, 4, 4});
  EmbeddingSet z{torch::randn({2, 9, 12}), 3, 3};
  const auto att = xa->attend(f, z, true);
  const double rows = max_abs(att.weights.sum(-1) - 1.0);
  c.add(rows < 1e-6, "row sums err " + fmt(rows));

  auto same = torch::randn({2, 1, 12}).expand({2, 9, 12}).contiguous();
  EmbeddingSet zs{same, 3, 3};
  const auto collapse = xa->attend(f, zs, true);
  const auto single = xa->attend(f, EmbeddingSet{same.slice(1, 0, 1), 1, 1});
  const double col = std::max(max_abs(collapse.weights - 1.0 / 9), max_abs(collapse.values - single.values));
  c.add(col < 1e-6, "identical-token collapse err " + fmt(col));

  auto perm = torch::randperm(9, torch::kLong);
  const double inv = max_abs(xa->forward(f, z) - xa->forward(f, EmbeddingSet{z.tokens.index_select(1, perm), 3, 3}));
  c.add(inv < 1e-5, "key/value permutation err " + fmt(inv));
  return c.done();
}

Outcome diagnostics() {
  Checklist c;
  DatasetSpec spec;
  std::vector<Field> up, targets;
  std::vector<Scene> test;
  for (int i = 0; i < spec.n_test; ++i) test.push_back(generate_scene(spec.test_seed_base + i, spec.scene));
  ResidualNormalizer norm;
  norm.mu = 0.0;
  norm.sigma = 1.0;
  norm.band_lo.assign(6, 0.0);
  norm.band_hi.assign(6, 1.0);
  const auto [top, left] = center_crop_offset(spec.scene.size, spec.crop.crop);
  for (const auto& s : test) {
    const auto smp = make_sample(s, top, left, spec.crop, norm);
    up.push_back(smp.upsampled);
    targets.push_back(smp.target);
  }
  const auto map = per_pixel_rmse_map(up, targets);
  const auto score = checkerboard_score(map, spec.crop.scale);
  c.add(score && *score > 1.0, "bicubic checkerboard score " + (score ? fmt(*score) : std::string("n/a")) + " over " +
                                   std::to_string(test.size()) + " patches");

  EncoderConfig ec;
  auto enc = make_encoder(ec, 11);
  enc->freeze();
  const auto self = embedding_frechet_distance(enc, targets, targets, 10.0, 45.0);
  c.add(std::abs(self.value) < 1e-6, "FED(X,X) " + fmt(self.value));
  const double h1 = frechet_distance_gaussians({0.0}, {{1.0}}, {1.0}, {{1.0}});
  const double h2 = frechet_distance_gaussians({0.0}, {{1.0}}, {0.0}, {{4.0}});
  c.add(h1 == 1.0, "means 0 vs 1 -> " + fmt(h1, 17));
  c.add(h2 == 1.0, "variances 1 vs 4 -> " + fmt(h2, 17));
  return c.done();
}

std::vector<std::string> tiny_overrides(const std::string& root) {
  return {"output_root=" + root,
          "dataset.n_train=6",
          "dataset.n_test=4",
          "encoder.config.dim=16",
          "encoder.config.depth=1",
          "encoder.config.heads=2",
          "encoder.pretrain.steps=10",
          "encoder.pretrain.batch=4",
          "encoder.scenes=6",
          "encoder.heldout=2",
          "model.base_channels=8",
          "model.norm_groups=4",
          "model.position_dim=8",
          "model.attention_factors=[4]",
          "schedules.vp.steps=20",
          "train.iterations=6",
          "train.batch=2",
          "train.checkpoint_every=3",
          "train.log_every=2",
          "eval.batch=4"};
}

nlohmann::json pipeline(const ExperimentConfig& c) {
  nlohmann::json d;
  d["data"] = cmd_gen_data(c).at("dataset_digest");
  d["encoder"] = cmd_pretrain_encoder(c).at("checksum");
  for (const auto& v : c.variants) d["train/" + v] = cmd_train(c, v, {}).at("checkpoint_digest");
  d["sample"] = cmd_sample(c, "x0_efm", 0, std::nullopt).at("output_digest");
  d["sample_eps"] = cmd_sample(c, "eps_efm", 0, std::nullopt).at("output_digest");
  const auto ev = cmd_eval(c);
  for (const char* k : {"table1_digest", "report_digest", "maps_digest"}) d[std::string("eval/") + k] = ev.at(k);
  return d;
}

Outcome reproducibility() {
  Checklist c;
  TempDir a("repro_a"), b("repro_b");
  const auto ca = load_config("", tiny_overrides(a.str())), cb = load_config("", tiny_overrides(b.str()));
  const auto da = pipeline(ca), db = pipeline(cb);
  int same = 0;
  for (const auto& [k, v] : da.items()) {
    const bool eq = db.contains(k) && db.at(k) == v;
    same += eq;
    if (!eq) c.add(false, k + " differs");
  }
  c.add(same == static_cast<int>(da.size()), std::to_string(same) + "/" + std::to_string(da.size()) +
                                                 " command outputs identical across independent roots");
  // Same seed, different sampling seed must change the draw.
  const auto other = cmd_sample(ca, "x0_efm", 0, 99).at("output_digest");
  c.add(other != da.at("sample"), "different sampling seed changes output");

  // Interrupted then resumed training equals the uninterrupted run.
  TrainOptions first;
  first.overwrite = true;
  first.stop_after = 4;
  cmd_train(ca, "x0_efm", first);
  TrainOptions rest;
  rest.resume = true;
  const auto resumed = cmd_train(ca, "x0_efm", rest);
  c.add(resumed.at("first_iteration") == 4 && resumed.at("checkpoint_digest") == da.at("train/x0_efm"),
        "resume 4+2 equals uninterrupted 6");
  TrainOptions refuse;
  bool refused = false;
  try {
    cmd_train(ca, "x0_efm", refuse);
  } catch (const std::exception&) {
    refused = true;
  }
  c.add(refused, "existing checkpoint not silently overwritten");
  return c.done();
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  Report r;
  r.run(1, "schedules", 1.0, schedules);
  r.run(2, "degradation", 10.0, degradation);
  r.run(3, "oracle samplers", 30.0, oracle_samplers);
  r.run(4, "gradient check", 120.0, gradients);
  r.run(5, "cross-attention contract", 1.0, attention_contract);
  r.run(9, "diagnostics", 0.0, diagnostics);
  r.run(10, "reproducibility", 0.0, reproducibility);
  return r.exit_code();
}
