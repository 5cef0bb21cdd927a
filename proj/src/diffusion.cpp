#include "efdiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace efdiff {

namespace {

torch::Tensor gather_coefficients(const std::vector<double>& table_by_t, const torch::Tensor& timesteps,
                                  const torch::Tensor& like) {
  auto t = timesteps.to(torch::kInt64).contiguous();
  const auto* p = t.data_ptr<std::int64_t>();
  auto out = torch::empty({t.size(0)}, torch::kFloat64);
  auto* o = out.data_ptr<double>();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    if (p[i] < 0 || p[i] >= static_cast<std::int64_t>(table_by_t.size()))
      throw std::out_of_range("diffusion: timestep " + std::to_string(p[i]) + " out of range");
    o[i] = table_by_t[p[i]];
  }
  std::vector<std::int64_t> shape(like.dim(), 1);
  shape[0] = t.size(0);
  return out.to(like.scalar_type()).view(shape);
}

void require_timestep_range(const torch::Tensor& t, int steps) {
  if ((t < 1).any().item<bool>() || (t > steps).any().item<bool>())
    throw std::out_of_range("diffusion: timestep outside [1, T]");
}

torch::Tensor full_timesteps(std::int64_t batch, int t) { return torch::full({batch}, t, torch::kInt64); }

void require_head(const Denoiser& d, HeadMode mode, const char* what) {
  if (d->config().head != mode)
    throw std::invalid_argument(std::string(what) + ": denoiser head mode is " + to_string(d->config().head) +
                                ", expected " + to_string(mode));
}

}  // namespace

ModelFn bind_denoiser(Denoiser& denoiser, const ConditionedBatch& batch) {
  return ModelFn([&denoiser, &batch](const torch::Tensor& state, const torch::Tensor& timesteps) {
    DenoiserInput in;
    in.state = state;
    in.upsampled = batch.upsampled;
    in.reflectance = batch.reflectance;
    in.context = batch.context.tokens.defined() ? &batch.context : nullptr;
    in.timesteps = timesteps;
    return denoiser->forward(in);
  });
}

torch::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

NoiseDraw draw_noise(const torch::Tensor& like, int steps, std::uint64_t seed) {
  auto gen = make_generator(seed);
  NoiseDraw d;
  d.timesteps = torch::randint(1, steps + 1, {like.size(0)}, gen, torch::kInt64);
  d.noise = torch::randn(like.sizes(), gen, like.options());
  return d;
}

torch::Tensor vp_forward(const torch::Tensor& clean, const torch::Tensor& timesteps, const torch::Tensor& noise,
                         const VPSchedule& schedule) {
  require_timestep_range(timesteps, schedule.steps);
  std::vector<double> signal(schedule.steps + 1), sigma(schedule.steps + 1);
  for (int t = 0; t <= schedule.steps; ++t) {
    signal[t] = std::sqrt(schedule.alpha_bar_at(t));
    sigma[t] = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  }
  return gather_coefficients(signal, timesteps, clean) * clean + gather_coefficients(sigma, timesteps, clean) * noise;
}

torch::Tensor vp_forward(const torch::Tensor& clean, int t, const torch::Tensor& noise, const VPSchedule& schedule) {
  if (t < 1 || t > schedule.steps) throw std::out_of_range("vp_forward: t outside [1, T]");
  const double a = schedule.alpha_bar_at(t);
  return std::sqrt(a) * clean + std::sqrt(1.0 - a) * noise;
}

torch::Tensor shift_forward(const torch::Tensor& clean, const torch::Tensor& timesteps, const torch::Tensor& noise,
                            const ShiftSchedule& schedule) {
  require_timestep_range(timesteps, schedule.steps);
  std::vector<double> keep(schedule.steps + 1), scale(schedule.steps + 1);
  for (int t = 0; t <= schedule.steps; ++t) {
    keep[t] = 1.0 - schedule.eta_at(t);
    scale[t] = schedule.kappa * std::sqrt(schedule.eta_at(t));
  }
  return gather_coefficients(keep, timesteps, clean) * clean + gather_coefficients(scale, timesteps, clean) * noise;
}

torch::Tensor shift_forward(const torch::Tensor& clean, int t, const torch::Tensor& noise,
                            const ShiftSchedule& schedule) {
  if (t < 1 || t > schedule.steps) throw std::out_of_range("shift_forward: t outside [1, T]");
  const double eta = schedule.eta_at(t);
  return (1.0 - eta) * clean + schedule.kappa * std::sqrt(eta) * noise;
}

torch::Tensor loss_eps(const ModelFn& model, const torch::Tensor& clean, const VPSchedule& schedule,
                       const NoiseDraw& draw) {
  auto noisy = vp_forward(clean, draw.timesteps, draw.noise, schedule);
  return (draw.noise - model(noisy, draw.timesteps)).abs().mean();
}

torch::Tensor loss_x0(const ModelFn& model, const torch::Tensor& clean, const ShiftSchedule& schedule,
                      const NoiseDraw& draw) {
  auto noisy = shift_forward(clean, draw.timesteps, draw.noise, schedule);
  return (clean - model(noisy, draw.timesteps)).pow(2).mean();
}

torch::Tensor loss_eps(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule,
                       const NoiseDraw& draw) {
  require_head(denoiser, HeadMode::Epsilon, "loss_eps");
  return loss_eps(bind_denoiser(denoiser, batch), batch.residual, schedule, draw);
}

torch::Tensor loss_x0(Denoiser& denoiser, const ConditionedBatch& batch, const ShiftSchedule& schedule,
                      const NoiseDraw& draw) {
  require_head(denoiser, HeadMode::X0, "loss_x0");
  return loss_x0(bind_denoiser(denoiser, batch), batch.residual, schedule, draw);
}

torch::Tensor predict_regression(Denoiser& denoiser, const ConditionedBatch& batch) {
  require_head(denoiser, HeadMode::Regression, "regression");
  DenoiserInput in;
  in.upsampled = batch.upsampled;
  in.reflectance = batch.reflectance;
  in.context = batch.context.tokens.defined() ? &batch.context : nullptr;
  return denoiser->forward(in);
}

torch::Tensor loss_regression(Denoiser& denoiser, const ConditionedBatch& batch) {
  return (batch.residual - predict_regression(denoiser, batch)).abs().mean();
}

torch::Tensor sample_ddpm(const ModelFn& eps_model, at::IntArrayRef shape, const VPSchedule& schedule,
                          std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  auto x = torch::randn(shape, gen, torch::kFloat32);
  const auto B = shape[0];
  for (int t = schedule.steps; t >= 1; --t) {
    const double a_t = schedule.alpha_bar_at(t), a_prev = schedule.alpha_bar_at(t - 1);
    const double beta = schedule.beta_at(t);
    auto eps = eps_model(x, full_timesteps(B, t));
    auto x0 = (x - std::sqrt(1.0 - a_t) * eps) / std::sqrt(a_t);
    const double c_x0 = std::sqrt(a_prev) * beta / (1.0 - a_t);
    const double c_xt = std::sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t);
    x = c_x0 * x0 + c_xt * x;
    if (t > 1) {
      const double var = beta * (1.0 - a_prev) / (1.0 - a_t);
      x = x + std::sqrt(var) * torch::randn(shape, gen, torch::kFloat32);
    }
  }
  return x;
}

torch::Tensor sample_ddim(const ModelFn& eps_model, at::IntArrayRef shape, const VPSchedule& schedule, int steps,
                          std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  const auto ts = ddim_subsequence(schedule.steps, steps);
  auto gen = make_generator(seed);
  auto x = torch::randn(shape, gen, torch::kFloat32);
  const auto B = shape[0];
  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
    const int t = ts[i];
    const int t_prev = i > 0 ? ts[i - 1] : 0;
    const double a_t = schedule.alpha_bar_at(t), a_prev = schedule.alpha_bar_at(t_prev);
    auto eps = eps_model(x, full_timesteps(B, t));
    auto x0 = (x - std::sqrt(1.0 - a_t) * eps) / std::sqrt(a_t);
    x = t_prev == 0 ? x0 : std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps;
  }
  return x;
}

torch::Tensor sample_shift(const ModelFn& x0_model, at::IntArrayRef shape, const ShiftSchedule& schedule, int steps,
                           std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  const auto ts = ddim_subsequence(schedule.steps, steps);
  auto gen = make_generator(seed);
  const auto B = shape[0];
  auto x = schedule.kappa * std::sqrt(schedule.eta_at(schedule.steps)) * torch::randn(shape, gen, torch::kFloat32);
  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
    const int t = ts[i];
    const int t_prev = i > 0 ? ts[i - 1] : 0;
    auto x0 = x0_model(x, full_timesteps(B, t));
    if (t_prev == 0) {
      x = x0;
      break;
    }
    const double eta = schedule.eta_at(t), eta_prev = schedule.eta_at(t_prev);
    const double alpha = eta - eta_prev;
    const double std_dev = schedule.kappa * std::sqrt(eta_prev * alpha / eta);
    x = (eta_prev / eta) * x + (alpha / eta) * x0 + std_dev * torch::randn(shape, gen, torch::kFloat32);
  }
  return x;
}

torch::Tensor sample_ddpm(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule,
                          std::uint64_t seed) {
  require_head(denoiser, HeadMode::Epsilon, "sample_ddpm");
  return sample_ddpm(bind_denoiser(denoiser, batch), batch.upsampled.sizes(), schedule, seed);
}

torch::Tensor sample_ddim(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule, int steps,
                          std::uint64_t seed) {
  require_head(denoiser, HeadMode::Epsilon, "sample_ddim");
  return sample_ddim(bind_denoiser(denoiser, batch), batch.upsampled.sizes(), schedule, steps, seed);
}

torch::Tensor sample_shift(Denoiser& denoiser, const ConditionedBatch& batch, const ShiftSchedule& schedule, int steps,
                           std::uint64_t seed) {
  require_head(denoiser, HeadMode::X0, "sample_shift");
  return sample_shift(bind_denoiser(denoiser, batch), batch.upsampled.sizes(), schedule, steps, seed);
}

Field reconstruct(const Field& upsampled, const Field& residual_std, const ResidualNormalizer& normalizer) {
  return add_residual(upsampled, normalizer.unstandardize(residual_std));
}

}  // namespace efdiff
