#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "efdiff/attention.hpp"
#include "efdiff/degrade.hpp"
#include "efdiff/denoiser.hpp"
#include "efdiff/schedules.hpp"

namespace efdiff {

// All diffusion-side tensors are standardized residuals of shape [B, 1, H, W].

/// Network evaluated at a state and per-sample timesteps ([B] int64).
/// Construction is explicit so that a Denoiser argument never considers
/// this conversion.
class ModelFn {
 public:
  using Fn = std::function<torch::Tensor(const torch::Tensor& state, const torch::Tensor& timesteps)>;
  ModelFn() = default;
  explicit ModelFn(Fn fn) : fn_(std::move(fn)) {}
  torch::Tensor operator()(const torch::Tensor& state, const torch::Tensor& timesteps) const {
    return fn_(state, timesteps);
  }

 private:
  Fn fn_;
};

/// Conditioning inputs for one batch of patches.
struct ConditionedBatch {
  torch::Tensor residual;     // clean R' [B, 1, H, W]
  torch::Tensor upsampled;    // network-scaled X_tilde [B, 1, H, W]
  torch::Tensor reflectance;  // [B, C, H, W]
  EmbeddingSet context;       // frozen-encoder tokens (may be empty)
};

/// Binds a denoiser to the conditioning of a batch.
ModelFn bind_denoiser(Denoiser& denoiser, const ConditionedBatch& batch);

torch::Generator make_generator(std::uint64_t seed);

struct NoiseDraw {
  torch::Tensor timesteps;  // [B] int64, uniform on [1, T]
  torch::Tensor noise;      // unit Gaussian, same shape as the residual
};
NoiseDraw draw_noise(const torch::Tensor& like, int steps, std::uint64_t seed);

torch::Tensor vp_forward(const torch::Tensor& clean, const torch::Tensor& timesteps, const torch::Tensor& noise,
                         const VPSchedule& schedule);
torch::Tensor vp_forward(const torch::Tensor& clean, int t, const torch::Tensor& noise, const VPSchedule& schedule);
torch::Tensor shift_forward(const torch::Tensor& clean, const torch::Tensor& timesteps, const torch::Tensor& noise,
                            const ShiftSchedule& schedule);
torch::Tensor shift_forward(const torch::Tensor& clean, int t, const torch::Tensor& noise,
                            const ShiftSchedule& schedule);

/// Mean absolute error between the drawn noise and the prediction at the
/// vp-corrupted state.
torch::Tensor loss_eps(const ModelFn& model, const torch::Tensor& clean, const VPSchedule& schedule,
                       const NoiseDraw& draw);
/// Mean squared error between the clean residual and the prediction at the
/// shift-corrupted state.
torch::Tensor loss_x0(const ModelFn& model, const torch::Tensor& clean, const ShiftSchedule& schedule,
                      const NoiseDraw& draw);
// Head-mode-checked overloads.
torch::Tensor loss_eps(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule,
                       const NoiseDraw& draw);
torch::Tensor loss_x0(Denoiser& denoiser, const ConditionedBatch& batch, const ShiftSchedule& schedule,
                      const NoiseDraw& draw);
/// Single-pass L1 against the clean residual (regression baseline).
torch::Tensor loss_regression(Denoiser& denoiser, const ConditionedBatch& batch);

/// Ancestral sampler with posterior variance beta_tilde, over all T steps.
torch::Tensor sample_ddpm(const ModelFn& eps_model, at::IntArrayRef shape, const VPSchedule& schedule,
                          std::uint64_t seed);
/// Deterministic (eta = 0) DDIM over ddim_subsequence(T, steps).
torch::Tensor sample_ddim(const ModelFn& eps_model, at::IntArrayRef shape, const VPSchedule& schedule, int steps,
                          std::uint64_t seed);
/// Reverse residual-shift chain from kappa sqrt(eta_T) eps, over
/// ddim_subsequence(T, steps), substituting the model's clean-residual
/// prediction into the posterior at each step.
torch::Tensor sample_shift(const ModelFn& x0_model, at::IntArrayRef shape, const ShiftSchedule& schedule, int steps,
                           std::uint64_t seed);

torch::Tensor sample_ddpm(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule,
                          std::uint64_t seed);
torch::Tensor sample_ddim(Denoiser& denoiser, const ConditionedBatch& batch, const VPSchedule& schedule, int steps,
                          std::uint64_t seed);
torch::Tensor sample_shift(Denoiser& denoiser, const ConditionedBatch& batch, const ShiftSchedule& schedule, int steps,
                           std::uint64_t seed);
torch::Tensor predict_regression(Denoiser& denoiser, const ConditionedBatch& batch);

/// Y_hat = X_tilde + unstandardize(R_hat').
Field reconstruct(const Field& upsampled, const Field& residual_std, const ResidualNormalizer& normalizer);

}  // namespace efdiff
