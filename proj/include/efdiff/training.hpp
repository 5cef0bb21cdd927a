#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "efdiff/denoiser.hpp"
#include "efdiff/diffusion.hpp"
#include "efdiff/encoder.hpp"
#include "efdiff/schedules.hpp"
#include "efdiff/synthdata.hpp"
#include "efdiff/tensor_file.hpp"

namespace efdiff {

struct TrainConfig {
  double learning_rate = 5e-5;
  int iterations = 20'000;
  int batch = 8;
  double clip_norm = 1.0;
  double ema_decay = 0.9999;
  // Caps the EMA decay at (1 + k) / (10 + k) after k updates.
  bool ema_warmup = true;
  std::uint64_t seed = 0;
  HeadMode formulation = HeadMode::X0;
  Conditioning conditioning = Conditioning::EfmCrossAttention;
  int checkpoint_every = 1000;
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  // Digest used to accept or refuse a resume; excludes run-length fields.
  std::string resume_digest() const;
};

/// Learning rates per formulation.
double default_learning_rate(HeadMode formulation);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<torch::Tensor>& params);
  std::int64_t steps() const { return step_; }

  void save(TensorMap& out, const std::vector<std::string>& names) const;
  void load(const TensorMap& in, const std::vector<std::string>& names, std::int64_t steps);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<torch::Tensor> m_, v_;
};

double global_grad_norm(const std::vector<torch::Tensor>& params);
/// Rescales gradients so the global norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);

/// ema <- decay * ema + (1 - decay) * raw, parameter by parameter.
void ema_update(const std::vector<torch::Tensor>& raw, std::vector<torch::Tensor>& ema, double decay);
double ema_effective_decay(double decay, std::int64_t updates, bool warmup);

/// Builds network inputs for patches drawn from a scene split.
class BatchBuilder {
 public:
  BatchBuilder(const std::vector<Scene>& scenes, ResidualNormalizer normalizer, CropPolicy policy,
               Conditioning conditioning, ViTEncoder encoder);

  /// Random scenes and random crops, fully determined by seed.
  ConditionedBatch random_batch(int batch, std::uint64_t seed, std::vector<Sample>* samples = nullptr) const;
  /// Centre crops of the scenes [begin, end).
  ConditionedBatch center_batch(std::size_t begin, std::size_t end, std::vector<Sample>* samples = nullptr) const;
  ConditionedBatch from_samples(const std::vector<Sample>& samples) const;
  std::size_t size() const { return scenes_.size(); }
  const ResidualNormalizer& normalizer() const { return normalizer_; }

 private:
  const std::vector<Scene>& scenes_;
  ResidualNormalizer normalizer_;
  CropPolicy policy_;
  Conditioning conditioning_;
  mutable ViTEncoder encoder_;
};

struct Checkpoint {
  TensorMap params;
  TensorMap ema;
  TensorMap adam_m;
  TensorMap adam_v;
  nlohmann::json manifest;  // iteration, configs, schedule, digests

  std::int64_t iteration() const { return manifest.at("iteration").get<std::int64_t>(); }
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);
/// Denoiser restored from a checkpoint, EMA weights by default.
Denoiser load_denoiser(const std::string& checkpoint_path, bool use_ema = true);

struct TrainResult {
  std::vector<double> losses;  // indexed by iteration - first_iteration
  std::int64_t first_iteration = 0;
  std::int64_t final_iteration = 0;
  std::string checkpoint_path;
  std::string encoder_checksum_before, encoder_checksum_after;
};

struct TrainSetup {
  DenoiserConfig model;
  TrainConfig train;
  std::optional<VPSchedule> vp;        // epsilon formulation
  std::optional<ShiftSchedule> shift;  // x0 formulation
  std::string dataset_digest;
  std::uint64_t init_seed = 1;
};

/// Runs (or resumes) training into out_dir: checkpoint.bin/.json and
/// loss.csv. Non-finite loss aborts; the last written checkpoint stays.
/// stop_after limits this invocation (the run can be resumed later).
TrainResult train(const TrainSetup& setup, const BatchBuilder& data, ViTEncoder encoder, const std::string& out_dir,
                  bool resume = false, std::optional<int> stop_after = std::nullopt);

/// Loss of the given model on one fixed batch, no gradient.
double evaluate_loss(Denoiser& denoiser, const TrainSetup& setup, const ConditionedBatch& batch, std::uint64_t seed);

}  // namespace efdiff
