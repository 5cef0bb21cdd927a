#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "efdiff/experiment.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("-s,--set", c.overrides, "dotted key=value override (repeatable)");
}

efdiff::ExperimentConfig configure(const Common& c) {
  auto cfg = efdiff::load_config(c.config, c.overrides);
  if (cfg.threads > 0) torch::set_num_threads(cfg.threads);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual diffusion super-resolution of scalar fields guided by a frozen encoder"};
  app.require_subcommand(1);
  std::string command;
  Common common;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* pre = app.add_subcommand("pretrain-encoder", "MAE-pretrain (or randomly initialise) and freeze the encoder");
  auto* trn = app.add_subcommand("train", "train one model variant");
  auto* smp = app.add_subcommand("sample", "sample the test set with one variant");
  auto* evl = app.add_subcommand("eval", "per-group metric table for bicubic and every configured variant");
  auto* abs = app.add_subcommand("ablate-steps", "sampling-step ablation table");
  auto* abc = app.add_subcommand("ablate-cond", "cross-attention vs channel-concatenation analysis");
  auto* plt = app.add_subcommand("plot", "render figures from stored reports");
  auto* cfg = app.add_subcommand("config", "print the merged configuration");
  for (auto* c : {gen, pre, trn, smp, evl, abs, abc, plt, cfg}) add_common(c, common);

  std::string variant;
  efdiff::TrainOptions train_options;
  int stop_after = 0;
  trn->add_option("variant", variant, "x0_efm, x0_concat, eps_efm, eps_concat, regression_efm, ...")->required();
  trn->add_flag("--resume", train_options.resume, "continue from the existing checkpoint");
  trn->add_flag("--overwrite", train_options.overwrite, "discard an existing checkpoint");
  trn->add_option("--stop-after", stop_after, "stop this invocation after N iterations");

  int steps = 0;
  std::optional<std::uint64_t> seed;
  smp->add_option("variant", variant)->required();
  smp->add_option("--steps", steps, "sampling steps (default: evaluation setting)");
  smp->add_option("--seed", seed, "sampling seed (default: eval.sample_seed)");

  CLI11_PARSE(app, argc, argv);

  auto* active = app.get_subcommands().front();
  command = active->get_name();
  try {
    const auto config = configure(common);
    nlohmann::json out;
    if (command == "gen-data") out = efdiff::cmd_gen_data(config);
    else if (command == "pretrain-encoder") out = efdiff::cmd_pretrain_encoder(config);
    else if (command == "train") {
      if (stop_after > 0) train_options.stop_after = stop_after;
      out = efdiff::cmd_train(config, variant, train_options);
    } else if (command == "sample") out = efdiff::cmd_sample(config, variant, steps, seed);
    else if (command == "eval") out = efdiff::cmd_eval(config);
    else if (command == "ablate-steps") out = efdiff::cmd_ablate_steps(config);
    else if (command == "ablate-cond") out = efdiff::cmd_ablate_cond(config);
    else if (command == "plot") out = efdiff::cmd_plot(config);
    else if (command == "config") out = config.snapshot;
    std::cout << out.dump(2) << std::endl;
    return 0;
  } catch (const std::exception& e) {
    nlohmann::json err = {{"command", command}, {"error", e.what()}};
    std::cerr << err.dump() << std::endl;
    return 2;
  }
}
