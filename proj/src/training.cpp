#include "efdiff/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "efdiff/digest.hpp"

namespace efdiff {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("train config: learning rate must be > 0");
  if (!(clip_norm > 0)) throw std::invalid_argument("train config: clip norm must be > 0");
  if (!(ema_decay > 0 && ema_decay < 1)) throw std::invalid_argument("train config: EMA decay must lie in (0, 1)");
  if (iterations < 1 || batch < 1) throw std::invalid_argument("train config: iterations and batch must be >= 1");
  if (checkpoint_every < 1 || log_every < 1) throw std::invalid_argument("train config: intervals must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"iterations", iterations},
          {"batch", batch},
          {"clip_norm", clip_norm},
          {"ema_decay", ema_decay},
          {"ema_warmup", ema_warmup},
          {"seed", seed},
          {"formulation", to_string(formulation)},
          {"conditioning", to_string(conditioning)},
          {"checkpoint_every", checkpoint_every},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("formulation")) c.formulation = head_mode_from_string(j.at("formulation"));
  c.learning_rate = j.value("learning_rate", default_learning_rate(c.formulation));
  c.iterations = j.value("iterations", c.iterations);
  c.batch = j.value("batch", c.batch);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.ema_warmup = j.value("ema_warmup", c.ema_warmup);
  c.seed = j.value("seed", c.seed);
  if (j.contains("conditioning")) c.conditioning = conditioning_from_string(j.at("conditioning"));
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  return c;
}

std::string TrainConfig::resume_digest() const {
  auto j = to_json();
  j.erase("iterations");
  j.erase("checkpoint_every");
  j.erase("log_every");
  return digest_hex(j.dump());
}

double default_learning_rate(HeadMode formulation) {
  switch (formulation) {
    case HeadMode::Epsilon: return 2e-5;
    case HeadMode::X0: return 5e-5;
    case HeadMode::Regression: return 1e-4;
  }
  return 1e-4;
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<torch::Tensor>& params) {
  torch::NoGradGuard no_grad;
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(torch::zeros_like(p));
      v_.push_back(torch::zeros_like(p));
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    if (!g.defined()) continue;
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / bc2).sqrt_().add_(eps_);
    params[i].addcdiv_(m_[i], denom, -lr_ / bc1);
  }
}

void Adam::save(TensorMap& out, const std::vector<std::string>& names) const {
  for (std::size_t i = 0; i < m_.size(); ++i) {
    out.emplace("adam_m/" + names[i], m_[i]);
    out.emplace("adam_v/" + names[i], v_[i]);
  }
}

void Adam::load(const TensorMap& in, const std::vector<std::string>& names, std::int64_t steps) {
  m_.clear();
  v_.clear();
  for (const auto& n : names) {
    m_.push_back(in.at("adam_m/" + n).clone());
    v_.push_back(in.at("adam_v/" + n).clone());
  }
  step_ = steps;
}

double global_grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    const auto& g = p.grad();
    if (g.defined()) sq += g.to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    torch::NoGradGuard no_grad;
    for (const auto& p : params)
      if (p.grad().defined()) p.grad().mul_(scale);
  }
  return norm;
}

void ema_update(const std::vector<torch::Tensor>& raw, std::vector<torch::Tensor>& ema, double decay) {
  if (raw.size() != ema.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!raw[i].sizes().equals(ema[i].sizes())) throw std::invalid_argument("ema_update: shape mismatch");
    ema[i].mul_(decay).add_(raw[i].detach(), 1.0 - decay);
  }
}

double ema_effective_decay(double decay, std::int64_t updates, bool warmup) {
  if (!warmup) return decay;
  return std::min(decay, (1.0 + static_cast<double>(updates)) / (10.0 + static_cast<double>(updates)));
}

BatchBuilder::BatchBuilder(const std::vector<Scene>& scenes, ResidualNormalizer normalizer, CropPolicy policy,
                           Conditioning conditioning, ViTEncoder encoder)
    : scenes_(scenes),
      normalizer_(std::move(normalizer)),
      policy_(policy),
      conditioning_(conditioning),
      encoder_(std::move(encoder)) {
  if (scenes_.empty()) throw std::invalid_argument("BatchBuilder: no scenes");
  if (conditioning_ == Conditioning::EfmCrossAttention && encoder_.is_empty())
    throw std::invalid_argument("BatchBuilder: efm_cross_attention needs an encoder");
}

ConditionedBatch BatchBuilder::random_batch(int batch, std::uint64_t seed, std::vector<Sample>* samples) const {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, scenes_.size() - 1);
  std::vector<Sample> drawn;
  for (int b = 0; b < batch; ++b) {
    const auto& scene = scenes_[pick(rng)];
    std::uniform_int_distribution<int> off(0, scene.thermal.height() - policy_.crop);
    const int top = off(rng), left = off(rng);
    drawn.push_back(make_sample(scene, top, left, policy_, normalizer_));
  }
  auto out = from_samples(drawn);
  if (samples) *samples = std::move(drawn);
  return out;
}

ConditionedBatch BatchBuilder::center_batch(std::size_t begin, std::size_t end, std::vector<Sample>* samples) const {
  std::vector<Sample> drawn;
  for (std::size_t i = begin; i < end && i < scenes_.size(); ++i) {
    auto [top, left] = center_crop_offset(scenes_[i].thermal.height(), policy_.crop);
    drawn.push_back(make_sample(scenes_[i], top, left, policy_, normalizer_));
  }
  auto out = from_samples(drawn);
  if (samples) *samples = std::move(drawn);
  return out;
}

ConditionedBatch BatchBuilder::from_samples(const std::vector<Sample>& samples) const {
  if (samples.empty()) throw std::invalid_argument("BatchBuilder: empty sample list");
  const auto B = static_cast<std::int64_t>(samples.size());
  const int H = samples.front().target.height(), W = samples.front().target.width();
  const int C = samples.front().reflectance.bands();
  ConditionedBatch b;
  b.residual = torch::empty({B, 1, H, W});
  b.upsampled = torch::empty({B, 1, H, W});
  b.reflectance = torch::empty({B, C, H, W});
  for (std::int64_t i = 0; i < B; ++i) {
    const auto& s = samples[i];
    b.residual[i][0].copy_(to_tensor(s.residual_std));
    b.upsampled[i][0].copy_((to_tensor(s.upsampled) - normalizer_.thermal_mean) / normalizer_.thermal_std);
    b.reflectance[i].copy_(to_tensor(s.reflectance));
  }
  if (conditioning_ == Conditioning::EfmCrossAttention) {
    torch::NoGradGuard no_grad;
    b.context = encoder_->embed(b.reflectance);
  }
  return b;
}

namespace {

std::string manifest_path(const std::string& weights) { return fs::path(weights).replace_extension(".json").string(); }

void split_named(const TensorMap& all, Checkpoint& ck) {
  for (const auto& [name, t] : all) {
    auto slash = name.find('/');
    const auto group = name.substr(0, slash);
    const auto key = name.substr(slash + 1);
    if (group == "param") ck.params.emplace(key, t);
    else if (group == "ema") ck.ema.emplace(key, t);
    else if (group == "adam_m") ck.adam_m.emplace(key, t);
    else if (group == "adam_v") ck.adam_v.emplace(key, t);
  }
}

void copy_into(const std::vector<torch::Tensor>& dst, const std::vector<std::string>& names, const TensorMap& src) {
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = src.find(names[i]);
    if (it == src.end()) throw std::invalid_argument("checkpoint: missing tensor " + names[i]);
    if (!it->second.sizes().equals(dst[i].sizes())) throw std::invalid_argument("checkpoint: shape mismatch " + names[i]);
    dst[i].copy_(it->second);
  }
}

torch::Tensor formulation_loss(Denoiser& denoiser, const TrainSetup& setup, const ConditionedBatch& batch,
                               std::uint64_t seed) {
  switch (setup.train.formulation) {
    case HeadMode::Epsilon:
      return loss_eps(denoiser, batch, *setup.vp, draw_noise(batch.residual, setup.vp->steps, seed));
    case HeadMode::X0:
      return loss_x0(denoiser, batch, *setup.shift, draw_noise(batch.residual, setup.shift->steps, seed));
    case HeadMode::Regression:
      return loss_regression(denoiser, batch);
  }
  throw std::logic_error("unreachable");
}

nlohmann::json schedule_json(const TrainSetup& setup) {
  if (setup.vp) return setup.vp->to_json();
  if (setup.shift) return setup.shift->to_json();
  return nullptr;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  TensorMap all;
  for (const auto& [k, v] : ck.params) all.emplace("param/" + k, v);
  for (const auto& [k, v] : ck.ema) all.emplace("ema/" + k, v);
  for (const auto& [k, v] : ck.adam_m) all.emplace("adam_m/" + k, v);
  for (const auto& [k, v] : ck.adam_v) all.emplace("adam_v/" + k, v);
  save_tensors(path, all);
  auto manifest = ck.manifest;
  manifest["weights_digest"] = file_digest(path);
  write_json(manifest_path(path), manifest);
}

Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint ck;
  split_named(load_tensors(path), ck);
  ck.manifest = read_json(manifest_path(path));
  if (ck.ema.size() != ck.params.size()) throw std::runtime_error("checkpoint: EMA and raw parameter sets differ");
  for (const auto& [k, v] : ck.params) {
    auto it = ck.ema.find(k);
    if (it == ck.ema.end() || !it->second.sizes().equals(v.sizes()))
      throw std::runtime_error("checkpoint: EMA and raw parameter sets differ at " + k);
  }
  return ck;
}

Denoiser load_denoiser(const std::string& checkpoint_path, bool use_ema) {
  auto ck = load_checkpoint(checkpoint_path);
  auto config = DenoiserConfig::from_json(ck.manifest.at("model"));
  Denoiser d(config);
  std::vector<std::string> names;
  std::vector<torch::Tensor> params;
  for (const auto& item : d->named_parameters()) {
    names.push_back(item.key());
    params.push_back(item.value());
  }
  copy_into(params, names, use_ema ? ck.ema : ck.params);
  d->eval();
  return d;
}

double evaluate_loss(Denoiser& denoiser, const TrainSetup& setup, const ConditionedBatch& batch, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  return formulation_loss(denoiser, setup, batch, seed).item<double>();
}

TrainResult train(const TrainSetup& setup, const BatchBuilder& data, ViTEncoder encoder, const std::string& out_dir,
                  bool resume, std::optional<int> stop_after) {
  const auto& tc = setup.train;
  tc.validate();
  if (setup.model.head != tc.formulation) throw std::invalid_argument("train: head mode does not match formulation");
  if (setup.model.conditioning != tc.conditioning)
    throw std::invalid_argument("train: model conditioning does not match train config");
  if (tc.formulation == HeadMode::Epsilon && !setup.vp) throw std::invalid_argument("train: epsilon needs a vp schedule");
  if (tc.formulation == HeadMode::X0 && !setup.shift) throw std::invalid_argument("train: x0 needs a shift schedule");
  const bool efm = tc.conditioning == Conditioning::EfmCrossAttention;
  if (efm && (encoder.is_empty() || !encoder->frozen()))
    throw std::invalid_argument("train: efm_cross_attention requires a frozen encoder");

  fs::create_directories(out_dir);
  const std::string ck_path = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string csv_path = (fs::path(out_dir) / "loss.csv").string();

  auto denoiser = make_denoiser(setup.model, setup.init_seed);
  denoiser->train();
  std::vector<std::string> names;
  std::vector<torch::Tensor> params;
  for (const auto& item : denoiser->named_parameters()) {
    names.push_back(item.key());
    params.push_back(item.value());
  }
  std::vector<torch::Tensor> ema;
  for (const auto& p : params) ema.push_back(p.detach().clone());
  Adam adam(tc.learning_rate);

  const std::string encoder_checksum = efm ? encoder->checksum() : std::string("none");
  nlohmann::json base_manifest = {{"model", setup.model.to_json()},
                                  {"train", tc.to_json()},
                                  {"schedule", schedule_json(setup)},
                                  {"dataset_digest", setup.dataset_digest},
                                  {"encoder_checksum", encoder_checksum},
                                  {"init_seed", setup.init_seed}};
  const std::string resume_digest =
      digest_hex(setup.model.to_json().dump() + tc.resume_digest() + schedule_json(setup).dump() +
                 setup.dataset_digest + encoder_checksum + std::to_string(setup.init_seed));
  base_manifest["resume_digest"] = resume_digest;

  std::int64_t start = 0;
  double elapsed_before = 0.0;
  std::vector<std::string> csv_rows;
  if (resume && fs::exists(ck_path)) {
    auto ck = load_checkpoint(ck_path);
    if (ck.manifest.value("resume_digest", std::string()) != resume_digest)
      throw std::invalid_argument("train: refusing to resume, checkpoint config digest differs");
    copy_into(params, names, ck.params);
    copy_into(ema, names, ck.ema);
    TensorMap adam_state;
    for (const auto& [k, v] : ck.adam_m) adam_state.emplace("adam_m/" + k, v);
    for (const auto& [k, v] : ck.adam_v) adam_state.emplace("adam_v/" + k, v);
    adam.load(adam_state, names, ck.manifest.at("adam_steps").get<std::int64_t>());
    start = ck.iteration();
    elapsed_before = ck.manifest.value("wall_time", 0.0);
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (std::stoll(line.substr(0, line.find(','))) <= start) csv_rows.push_back(line);
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] { return elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto write_checkpoint = [&](std::int64_t iteration) {
    Checkpoint ck;
    for (std::size_t i = 0; i < names.size(); ++i) {
      ck.params.emplace(names[i], params[i].detach());
      ck.ema.emplace(names[i], ema[i]);
    }
    TensorMap adam_state;
    adam.save(adam_state, names);
    for (const auto& [k, v] : adam_state) {
      if (k.rfind("adam_m/", 0) == 0) ck.adam_m.emplace(k.substr(7), v);
      else ck.adam_v.emplace(k.substr(7), v);
    }
    ck.manifest = base_manifest;
    ck.manifest["iteration"] = iteration;
    ck.manifest["adam_steps"] = adam.steps();
    ck.manifest["wall_time"] = wall();
    save_checkpoint(ck_path, ck);
    std::ostringstream csv;
    csv << "iteration,loss,grad_norm,wall_time\n";
    for (const auto& row : csv_rows) csv << row << "\n";
    write_text(csv_path, csv.str());
  };

  TrainResult result;
  result.first_iteration = start;
  result.checkpoint_path = ck_path;
  result.encoder_checksum_before = encoder_checksum;

  std::int64_t end = tc.iterations;
  if (stop_after) end = std::min<std::int64_t>(end, start + *stop_after);
  for (std::int64_t it = start; it < end; ++it) {
    auto batch = data.random_batch(tc.batch, mix_seed(tc.seed, static_cast<std::uint64_t>(it), 1));
    auto loss = formulation_loss(denoiser, setup, batch, mix_seed(tc.seed, static_cast<std::uint64_t>(it), 2));
    const double value = loss.item<double>();
    if (!std::isfinite(value))
      throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(it) +
                               "; last good checkpoint kept at " + ck_path);
    for (auto& p : params)
      if (p.grad().defined()) p.mutable_grad() = torch::Tensor();
    loss.backward();
    const double norm = clip_grad_norm(params, tc.clip_norm);
    adam.step(params);
    ema_update(params, ema, ema_effective_decay(tc.ema_decay, adam.steps() - 1, tc.ema_warmup));
    result.losses.push_back(value);
    const std::int64_t done = it + 1;
    if (done % tc.log_every == 0 || done == tc.iterations) {
      std::ostringstream row;
      row.precision(9);
      row << done << "," << value << "," << norm << "," << wall();
      csv_rows.push_back(row.str());
    }
    if (done % tc.checkpoint_every == 0 && done != end) write_checkpoint(done);
  }
  // A finished run resumed again leaves its files untouched.
  if (end > start || !fs::exists(ck_path)) write_checkpoint(end);
  result.final_iteration = std::max(end, start);
  result.encoder_checksum_after = efm ? encoder->checksum() : std::string("none");
  if (result.encoder_checksum_after != result.encoder_checksum_before)
    throw std::logic_error("train: frozen encoder parameters changed during training");
  return result;
}

}  // namespace efdiff
