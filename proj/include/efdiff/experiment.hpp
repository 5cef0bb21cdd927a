#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "efdiff/denoiser.hpp"
#include "efdiff/encoder.hpp"
#include "efdiff/synthdata.hpp"
#include "efdiff/training.hpp"

namespace efdiff {

/// Parsed experiment configuration. `snapshot` is the fully merged document
/// (defaults, file, overrides) written into every run directory.
struct ExperimentConfig {
  nlohmann::json snapshot;
  std::string output_root;

  DatasetSpec dataset;
  EncoderConfig encoder;
  std::string encoder_mode = "pretrained";  // pretrained | random
  std::uint64_t encoder_seed = 11;
  PretrainConfig pretrain;
  int pretrain_scenes = 200;
  int pretrain_heldout = 20;
  std::uint64_t pretrain_seed_base = 5'000'000;

  DenoiserConfig model;
  std::uint64_t model_seed = 1;
  int vp_steps = 1000;
  double beta_min = 1e-6, beta_max = 1e-2;
  int shift_steps = 15;
  double kappa = 1.0;
  double sqrt_eta_min = 0.04, sqrt_eta_max = 0.999;

  TrainConfig train;                  // formulation/conditioning set per variant
  std::optional<double> learning_rate;  // overrides the per-formulation defaults
  std::map<std::string, int> variant_iterations;  // per-variant run length
  std::vector<std::string> variants;

  std::vector<int> x0_steps;
  std::vector<int> eps_steps;
  int x0_eval_steps = 15;
  int eps_eval_steps = 50;
  std::uint64_t sample_seed = 2024;
  int eval_batch = 8;
  std::string cond_baseline = "x0_concat";
  std::string cond_model = "x0_efm";
  int threads = 0;  // 0 keeps the library default
};

nlohmann::json default_config_json();
/// Defaults, then the optional file, then dotted key=value overrides (values
/// parsed as JSON when possible, otherwise taken as strings). The output
/// root falls back to $EFDIFF_OUTPUT_ROOT, then "runs".
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides);
ExperimentConfig parse_config(const nlohmann::json& merged);

struct Variant {
  std::string name;
  HeadMode head;
  Conditioning conditioning;
};
/// x0_efm, eps_concat, regression_efm, x0_none, ...
Variant parse_variant(const std::string& name);

struct RunPaths {
  std::string root, data, encoder, models, eval, ablate_steps, ablate_cond, plots, samples, cache;
  std::string model_dir(const std::string& variant) const;
  std::string checkpoint(const std::string& variant) const;
};
RunPaths run_paths(const ExperimentConfig& config);

TrainSetup make_train_setup(const ExperimentConfig& config, const Variant& variant, const std::string& dataset_digest);

struct TrainOptions {
  bool resume = false;
  bool overwrite = false;
  std::optional<int> stop_after;
};

// Each command returns a JSON summary (also written into its run directory).
nlohmann::json cmd_gen_data(const ExperimentConfig& config);
nlohmann::json cmd_pretrain_encoder(const ExperimentConfig& config);
nlohmann::json cmd_train(const ExperimentConfig& config, const std::string& variant, const TrainOptions& options);
nlohmann::json cmd_sample(const ExperimentConfig& config, const std::string& variant, int steps,
                          std::optional<std::uint64_t> seed);
nlohmann::json cmd_eval(const ExperimentConfig& config);
nlohmann::json cmd_ablate_steps(const ExperimentConfig& config);
nlohmann::json cmd_ablate_cond(const ExperimentConfig& config);
nlohmann::json cmd_plot(const ExperimentConfig& config);

}  // namespace efdiff
