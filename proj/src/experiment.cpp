#include "efdiff/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include "efdiff/diffusion.hpp"
#include "efdiff/digest.hpp"
#include "efdiff/image_io.hpp"
#include "efdiff/metrics.hpp"
#include "efdiff/schedules.hpp"
#include "efdiff/tensor_file.hpp"

namespace efdiff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

json default_config_json() {
  DenoiserConfig model;
  json m = model.to_json();
  m.erase("head");
  m.erase("conditioning");
  return {
      {"output_root", nullptr},
      {"threads", 0},
      {"dataset", DatasetSpec{}.to_json()},
      {"encoder",
       {{"config", EncoderConfig{}.to_json()},
        {"mode", "pretrained"},
        {"init_seed", 11},
        {"pretrain", PretrainConfig{}.to_json()},
        {"scenes", 200},
        {"heldout", 20},
        {"seed_base", 5'000'000}}},
      {"model", m},
      {"model_seed", 1},
      {"schedules",
       {{"vp", {{"steps", 1000}, {"beta_min", 1e-6}, {"beta_max", 1e-2}}},
        {"shift",
         {{"steps", 15}, {"kappa", 1.0}, {"sqrt_eta_min", kDefaultSqrtEtaMin}, {"sqrt_eta_max", kDefaultSqrtEtaMax}}}}},
      {"train",
       {{"iterations", 20'000},
        {"batch", 8},
        {"clip_norm", 1.0},
        {"ema_decay", 0.9999},
        {"ema_warmup", true},
        {"seed", 0},
        {"checkpoint_every", 1000},
        {"log_every", 50},
        {"learning_rate", nullptr},
        {"variant_iterations", json::object()}}},
      {"variants", {"x0_efm", "x0_concat", "eps_efm", "regression_efm"}},
      {"eval",
       {{"x0_steps", {1, 3, 5, 10, 15}},
        {"eps_steps", {25, 50, 100, 250, 1000}},
        {"x0_eval_steps", 15},
        {"eps_eval_steps", 50},
        {"sample_seed", 2024},
        {"batch", 8},
        {"cond_baseline", "x0_concat"},
        {"cond_model", "x0_efm"}}},
  };
}

namespace {

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

// Keys whose default is an object that accepts new members.
bool open_object(const std::string& pointer) {
  return pointer.rfind("/dataset/scene", 0) == 0 || pointer.rfind("/train/variant_iterations", 0) == 0;
}

void check_known(const json& defaults, const json& given, const std::string& at) {
  if (!given.is_object() || !defaults.is_object()) return;
  for (const auto& [k, v] : given.items()) {
    const std::string here = at + "/" + k;
    if (!defaults.contains(k)) {
      if (open_object(here)) continue;
      throw std::invalid_argument("unknown config key " + here);
    }
    check_known(defaults.at(k), v, here);
  }
}

std::vector<int> scaled_grid(const std::vector<int>& base, int base_steps, int steps) {
  std::set<int> out;
  for (int v : base) {
    const int s = static_cast<int>(std::lround(static_cast<double>(v) * steps / base_steps));
    out.insert(std::clamp(s, 1, steps));
  }
  return {out.begin(), out.end()};
}

}  // namespace

ExperimentConfig parse_config(const json& merged) {
  ExperimentConfig c;
  c.snapshot = merged;
  if (!merged.at("output_root").is_null()) {
    c.output_root = merged.at("output_root").get<std::string>();
  } else if (const char* env = std::getenv("EFDIFF_OUTPUT_ROOT"); env && *env) {
    c.output_root = env;
  } else {
    c.output_root = "runs";
  }
  c.snapshot["output_root"] = c.output_root;
  c.threads = merged.at("threads");
  c.dataset = DatasetSpec::from_json(merged.at("dataset"));
  c.dataset.scene.validate();

  const auto& e = merged.at("encoder");
  c.encoder = EncoderConfig::from_json(e.at("config"));
  c.encoder.validate();
  c.encoder_mode = e.at("mode");
  if (c.encoder_mode != "pretrained" && c.encoder_mode != "random")
    throw std::invalid_argument("encoder.mode must be pretrained or random");
  c.encoder_seed = e.at("init_seed");
  c.pretrain = PretrainConfig::from_json(e.at("pretrain"));
  c.pretrain_scenes = e.at("scenes");
  c.pretrain_heldout = e.at("heldout");
  c.pretrain_seed_base = e.at("seed_base");

  c.model = DenoiserConfig::from_json(merged.at("model"));
  c.model.context_dim = c.encoder.dim;
  c.model.reflectance_bands = c.encoder.bands;
  c.model_seed = merged.at("model_seed");

  const auto& vp = merged.at("schedules").at("vp");
  c.vp_steps = vp.at("steps");
  c.beta_min = vp.at("beta_min");
  c.beta_max = vp.at("beta_max");
  const auto& sh = merged.at("schedules").at("shift");
  c.shift_steps = sh.at("steps");
  c.kappa = sh.at("kappa");
  c.sqrt_eta_min = sh.at("sqrt_eta_min");
  c.sqrt_eta_max = sh.at("sqrt_eta_max");

  const auto& t = merged.at("train");
  c.train.iterations = t.at("iterations");
  c.train.batch = t.at("batch");
  c.train.clip_norm = t.at("clip_norm");
  c.train.ema_decay = t.at("ema_decay");
  c.train.ema_warmup = t.at("ema_warmup");
  c.train.seed = t.at("seed");
  c.train.checkpoint_every = t.at("checkpoint_every");
  c.train.log_every = t.at("log_every");
  if (!t.at("learning_rate").is_null()) c.learning_rate = t.at("learning_rate").get<double>();
  c.variants = merged.at("variants").get<std::vector<std::string>>();
  for (const auto& v : c.variants) parse_variant(v);
  for (const auto& [name, n] : t.at("variant_iterations").items()) {
    parse_variant(name);
    if (!n.is_number_integer() || n.get<int>() < 1)
      throw std::invalid_argument("train.variant_iterations." + name + " must be a positive integer");
    c.variant_iterations[name] = n.get<int>();
  }

  const auto& ev = merged.at("eval");
  c.x0_steps = scaled_grid(ev.at("x0_steps").get<std::vector<int>>(), 15, c.shift_steps);
  c.eps_steps = scaled_grid(ev.at("eps_steps").get<std::vector<int>>(), 1000, c.vp_steps);
  c.x0_eval_steps = std::clamp<int>(ev.at("x0_eval_steps"), 1, c.shift_steps);
  c.eps_eval_steps = std::clamp<int>(ev.at("eps_eval_steps"), 1, c.vp_steps);
  c.sample_seed = ev.at("sample_seed");
  c.eval_batch = ev.at("batch");
  if (c.eval_batch < 1) throw std::invalid_argument("eval.batch must be >= 1");
  c.cond_baseline = ev.at("cond_baseline");
  c.cond_model = ev.at("cond_model");
  return c;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  const json defaults = default_config_json();
  json merged = defaults;
  if (!path.empty()) {
    if (!fs::exists(path)) throw std::invalid_argument("config file not found: " + path);
    const json file = read_json(path);
    check_known(defaults, file, "");
    merged.merge_patch(file);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must be key=value: " + o);
    std::string pointer = "/" + o.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const json::json_pointer ptr(pointer);
    if (!merged.contains(ptr) && !open_object(pointer))
      throw std::invalid_argument("unknown config key " + o.substr(0, eq));
    merged[ptr] = parse_value(o.substr(eq + 1));
  }
  return parse_config(merged);
}

Variant parse_variant(const std::string& name) {
  const auto us = name.find('_');
  if (us == std::string::npos) throw std::invalid_argument("unknown variant " + name);
  const std::string head = name.substr(0, us), cond = name.substr(us + 1);
  Variant v{name, HeadMode::X0, Conditioning::EfmCrossAttention};
  if (head == "x0") v.head = HeadMode::X0;
  else if (head == "eps") v.head = HeadMode::Epsilon;
  else if (head == "regression") v.head = HeadMode::Regression;
  else throw std::invalid_argument("unknown variant " + name);
  if (cond == "efm") v.conditioning = Conditioning::EfmCrossAttention;
  else if (cond == "concat") v.conditioning = Conditioning::ChannelConcat;
  else if (cond == "none") v.conditioning = Conditioning::None;
  else throw std::invalid_argument("unknown variant " + name);
  return v;
}

std::string RunPaths::model_dir(const std::string& variant) const { return (fs::path(models) / variant).string(); }
std::string RunPaths::checkpoint(const std::string& variant) const {
  return (fs::path(model_dir(variant)) / "checkpoint.bin").string();
}

RunPaths run_paths(const ExperimentConfig& c) {
  const fs::path r(c.output_root);
  return {r.string(),
          (r / "data").string(),
          (r / "encoder").string(),
          (r / "models").string(),
          (r / "eval").string(),
          (r / "ablate_steps").string(),
          (r / "ablate_cond").string(),
          (r / "plots").string(),
          (r / "samples").string(),
          (r / "cache").string()};
}

TrainSetup make_train_setup(const ExperimentConfig& c, const Variant& v, const std::string& dataset_digest) {
  TrainSetup s;
  s.model = c.model;
  s.model.head = v.head;
  s.model.conditioning = v.conditioning;
  s.train = c.train;
  s.train.formulation = v.head;
  s.train.conditioning = v.conditioning;
  s.train.learning_rate = c.learning_rate.value_or(default_learning_rate(v.head));
  if (auto it = c.variant_iterations.find(v.name); it != c.variant_iterations.end()) s.train.iterations = it->second;
  if (v.head == HeadMode::Epsilon) s.vp = build_vp_schedule(c.vp_steps, c.beta_min, c.beta_max);
  if (v.head == HeadMode::X0) s.shift = build_shift_schedule(c.shift_steps, c.kappa, c.sqrt_eta_min, c.sqrt_eta_max);
  s.dataset_digest = dataset_digest;
  s.init_seed = c.model_seed;
  return s;
}

// ---------------------------------------------------------------- helpers

namespace {

std::string encoder_file(const RunPaths& p) { return (fs::path(p.encoder) / "encoder.bin").string(); }

void write_run_record(const std::string& dir, const ExperimentConfig& c, const std::string& command, json record) {
  fs::create_directories(dir);
  write_json((fs::path(dir) / "config.json").string(), c.snapshot);
  record["command"] = command;
  record["config_digest"] = digest_hex(c.snapshot.dump());
  write_json((fs::path(dir) / "run.json").string(), record);
}

LoadedDataset open_dataset(const ExperimentConfig& c) {
  const auto p = run_paths(c);
  if (!fs::exists(fs::path(p.data) / "dataset.json"))
    throw std::runtime_error("no dataset under " + p.data + "; run gen-data first");
  auto d = load_dataset(p.data);
  if (d.spec.to_json() != c.dataset.to_json())
    throw std::runtime_error("dataset under " + p.data + " was built with a different dataset config");
  return d;
}

ViTEncoder open_encoder(const ExperimentConfig& c, bool required) {
  const auto path = encoder_file(run_paths(c));
  if (!fs::exists(path)) {
    if (required) throw std::runtime_error("no encoder at " + path + "; run pretrain-encoder first");
    return ViTEncoder(nullptr);
  }
  auto enc = load_encoder(path, c.encoder);
  if (!enc->frozen()) enc->freeze();
  return enc;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream o;
  o << std::setprecision(6) << std::fixed << v;
  return o.str();
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// Everything the evaluation commands share.
struct EvalContext {
  const ExperimentConfig& cfg;
  RunPaths paths;
  LoadedDataset data;
  ViTEncoder encoder{nullptr};
  std::vector<Sample> samples;
  std::vector<Field> targets;
  std::vector<GroupMasks> masks;
  EvaluationGroups groups = default_groups();
  double lo = 0.0, hi = 1.0;  // target range over the evaluation set

  explicit EvalContext(const ExperimentConfig& c) : cfg(c), paths(run_paths(c)), data(open_dataset(c)) {
    encoder = open_encoder(c, false);
    for (const auto& scene : data.test.scenes) {
      auto [top, left] = center_crop_offset(scene.thermal.height(), cfg.dataset.crop.crop);
      samples.push_back(make_sample(scene, top, left, cfg.dataset.crop, data.normalizer));
      targets.push_back(samples.back().target);
      masks.push_back(per_class_masks(samples.back().classes, groups));
    }
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (const auto& t : targets)
      for (double v : t.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
};

struct Method {
  std::string name;     // table label
  std::string variant;  // bicubic or a trained variant
  std::string sampler;  // bicubic | regression | shift | ddim | ddpm
  int steps = 0;
  bool native = false;
};

std::string sampler_for(const Variant& v, const ExperimentConfig& c, int& steps) {
  switch (v.head) {
    case HeadMode::X0: steps = c.x0_eval_steps; return "shift";
    case HeadMode::Epsilon: steps = c.eps_eval_steps; return "ddim";
    case HeadMode::Regression: steps = 1; return "regression";
  }
  return "";
}

Method main_method(const ExperimentConfig& c, const std::string& variant) {
  if (variant == "bicubic") return {"bicubic", "bicubic", "bicubic", 0, false};
  const auto v = parse_variant(variant);
  Method m;
  m.variant = variant;
  m.sampler = sampler_for(v, c, m.steps);
  m.native = (m.sampler == "shift" && m.steps == c.shift_steps);
  m.name = m.sampler == "regression" ? variant : variant + "@" + m.sampler + std::to_string(m.steps);
  return m;
}

// Standardized residual predictions for every evaluation patch, in order.
std::vector<Field> sample_residuals(EvalContext& ctx, const Method& m, std::uint64_t seed, json* record) {
  const auto ckpt = ctx.paths.checkpoint(m.variant);
  if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint for variant " + m.variant + " at " + ckpt);
  const auto v = parse_variant(m.variant);
  if (v.conditioning == Conditioning::EfmCrossAttention && ctx.encoder.is_empty())
    throw std::runtime_error("variant " + m.variant + " needs the encoder; run pretrain-encoder first");
  auto manifest = read_json(fs::path(ckpt).replace_extension(".json").string());
  if (manifest.at("dataset_digest") != ctx.data.digest)
    throw std::runtime_error("checkpoint for " + m.variant + " was trained on a different dataset");
  if (v.conditioning == Conditioning::EfmCrossAttention && manifest.at("encoder_checksum") != ctx.encoder->checksum())
    throw std::runtime_error("checkpoint for " + m.variant + " was trained with a different encoder");
  auto denoiser = load_denoiser(ckpt, true);
  std::optional<VPSchedule> vp;
  std::optional<ShiftSchedule> shift;
  if (v.head == HeadMode::Epsilon) vp = vp_schedule_from_json(manifest.at("schedule"));
  if (v.head == HeadMode::X0) shift = shift_schedule_from_json(manifest.at("schedule"));
  if (m.sampler == "shift" && (m.steps < 1 || m.steps > shift->steps))
    throw std::invalid_argument("shift sampler steps out of range");
  if (m.sampler == "ddim" && (m.steps < 1 || m.steps > vp->steps))
    throw std::invalid_argument("ddim sampler steps out of range");

  BatchBuilder builder(ctx.data.test.scenes, ctx.data.normalizer, ctx.cfg.dataset.crop, v.conditioning, ctx.encoder);
  torch::NoGradGuard no_grad;
  std::vector<Field> out;
  const std::size_t n = ctx.samples.size();
  const auto bs = static_cast<std::size_t>(ctx.cfg.eval_batch);
  for (std::size_t begin = 0, k = 0; begin < n; begin += bs, ++k) {
    const std::vector<Sample> chunk(ctx.samples.begin() + begin, ctx.samples.begin() + std::min(n, begin + bs));
    auto batch = builder.from_samples(chunk);
    const auto s = mix_seed(seed, k, 7);
    torch::Tensor r;
    if (m.sampler == "shift") r = sample_shift(denoiser, batch, *shift, m.steps, s);
    else if (m.sampler == "ddim") r = sample_ddim(denoiser, batch, *vp, m.steps, s);
    else if (m.sampler == "ddpm") r = sample_ddpm(denoiser, batch, *vp, s);
    else if (m.sampler == "regression") r = predict_regression(denoiser, batch);
    else throw std::invalid_argument("unknown sampler " + m.sampler);
    for (std::int64_t i = 0; i < r.size(0); ++i) out.push_back(field_from_tensor(r[i][0]));
  }
  if (record) {
    (*record)["checkpoint_digest"] = manifest.at("weights_digest");
    (*record)["schedule_digest"] = vp ? vp->digest() : shift ? shift->digest() : std::string("none");
    (*record)["iteration"] = manifest.at("iteration");
  }
  return out;
}

torch::Tensor stack_fields(const std::vector<Field>& fields) {
  std::vector<torch::Tensor> ts;
  for (const auto& f : fields) ts.push_back(to_tensor(f));
  return torch::stack(ts);
}

std::vector<Field> unstack_fields(const torch::Tensor& t) {
  std::vector<Field> out;
  for (std::int64_t i = 0; i < t.size(0); ++i) out.push_back(field_from_tensor(t[i]));
  return out;
}

// Reconstructed predictions, cached by everything that determines them.
std::vector<Field> predictions(EvalContext& ctx, const Method& m, json* record = nullptr) {
  std::vector<Field> out;
  if (m.sampler == "bicubic") {
    for (const auto& s : ctx.samples) out.push_back(s.upsampled);
    return out;
  }
  const auto ckpt = ctx.paths.checkpoint(m.variant);
  if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint for variant " + m.variant + " at " + ckpt);
  Digest key;
  key.update(file_digest(ckpt));
  key.update(m.sampler);
  key.update_pod(static_cast<std::int64_t>(m.steps));
  key.update_pod(ctx.cfg.sample_seed);
  key.update_pod(static_cast<std::int64_t>(ctx.cfg.eval_batch));
  key.update(ctx.data.digest);
  key.update(ctx.encoder.is_empty() ? std::string("none") : ctx.encoder->checksum());
  const auto cache = (fs::path(ctx.paths.cache) / (key.hex() + ".bin")).string();
  std::vector<Field> residuals;
  if (fs::exists(cache)) {
    auto t = load_tensors(cache);
    residuals = unstack_fields(t.at("residual_std"));
    if (record) *record = read_json(fs::path(cache).replace_extension(".json").string());
  } else {
    json rec;
    residuals = sample_residuals(ctx, m, ctx.cfg.sample_seed, &rec);
    fs::create_directories(ctx.paths.cache);
    save_tensors(cache, {{"residual_std", stack_fields(residuals)}});
    write_json(fs::path(cache).replace_extension(".json").string(), rec);
    if (record) *record = rec;
  }
  for (std::size_t i = 0; i < residuals.size(); ++i)
    out.push_back(reconstruct(ctx.samples[i].upsampled, residuals[i], ctx.data.normalizer));
  return out;
}

struct GroupRow {
  std::string group;
  int patches = 0;
  std::optional<double> rmse, rmse_masked, ssim;
};

struct MethodResult {
  Method method;
  std::vector<GroupRow> rows;
  std::vector<double> patch_rmse;
  std::optional<double> fed;
  bool fed_mean_only = false;
  Field map;
  std::optional<double> checkerboard;
  json record;
};

MethodResult score(EvalContext& ctx, const Method& m, const std::vector<Field>& preds, bool with_fed) {
  MethodResult r;
  r.method = m;
  const std::size_t n = preds.size();
  std::vector<double> patch_ssim(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.patch_rmse.push_back(rmse(preds[i], ctx.targets[i]));
    patch_ssim[i] = ssim(preds[i], ctx.targets[i], ctx.hi - ctx.lo);
  }
  const int ng = static_cast<int>(ctx.groups.names.size());
  for (int g = -1; g < ng; ++g) {
    GroupRow row;
    row.group = g < 0 ? "All" : ctx.groups.names[g];
    double se = 0, ss = 0, sem = 0;
    long npx = 0, npm = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = preds[i].values();
      const auto& t = ctx.targets[i].values();
      if (g >= 0) {
        const auto& mask = ctx.masks[i].masks[g];
        for (std::size_t k = 0; k < p.size(); ++k)
          if (mask[k]) {
            sem += (p[k] - t[k]) * (p[k] - t[k]);
            ++npm;
          }
      }
      if (g >= 0 && ctx.masks[i].patch_group != g) continue;
      ++row.patches;
      ss += patch_ssim[i];
      for (std::size_t k = 0; k < p.size(); ++k) se += (p[k] - t[k]) * (p[k] - t[k]);
      npx += static_cast<long>(p.size());
    }
    if (g < 0) {
      sem = se;
      npm = npx;
    }
    if (row.patches > 0) {
      row.rmse = std::sqrt(se / npx);
      row.ssim = ss / row.patches;
    }
    if (npm > 0) row.rmse_masked = std::sqrt(sem / npm);
    r.rows.push_back(row);
  }
  r.map = per_pixel_rmse_map(preds, ctx.targets);
  r.checkerboard = checkerboard_score(r.map, ctx.cfg.dataset.crop.scale);
  if (with_fed && !ctx.encoder.is_empty()) {
    auto f = embedding_frechet_distance(ctx.encoder, preds, ctx.targets, ctx.lo, ctx.hi);
    r.fed = f.value;
    r.fed_mean_only = f.mean_only;
  }
  return r;
}

json result_json(const MethodResult& r) {
  json rows = json::array();
  for (const auto& g : r.rows)
    rows.push_back({{"group", g.group},
                    {"patches", g.patches},
                    {"rmse", opt_json(g.rmse)},
                    {"rmse_masked", opt_json(g.rmse_masked)},
                    {"ssim", opt_json(g.ssim)}});
  return {{"name", r.method.name},
          {"variant", r.method.variant},
          {"sampler", r.method.sampler},
          {"steps", r.method.steps},
          {"native", r.method.native},
          {"rows", rows},
          {"patch_rmse", r.patch_rmse},
          {"fed", opt_json(r.fed)},
          {"fed_mean_only", r.fed_mean_only},
          {"checkerboard", opt_json(r.checkerboard)},
          {"sampling", r.record}};
}

std::string opt_csv(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::vector<std::uint64_t> patch_ids(const EvalContext& ctx) {
  std::vector<std::uint64_t> ids;
  for (const auto& s : ctx.samples) ids.push_back(s.seed);
  return ids;
}

json common_digests(const EvalContext& ctx) {
  return {{"dataset_digest", ctx.data.digest},
          {"encoder_checksum", ctx.encoder.is_empty() ? json(nullptr) : json(ctx.encoder->checksum())},
          {"ssim_dynamic_range", ctx.hi - ctx.lo},
          {"target_range", {ctx.lo, ctx.hi}},
          {"patch_ids", patch_ids(ctx)}};
}

std::vector<Field> read_maps(const std::string& path, const std::string& prefix, std::vector<std::string>* names) {
  std::vector<Field> out;
  for (const auto& [k, t] : load_tensors(path)) {
    if (k.rfind(prefix, 0) != 0) continue;
    if (names) names->push_back(k.substr(prefix.size()));
    out.push_back(field_from_tensor(t));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- commands

json cmd_gen_data(const ExperimentConfig& c) {
  const auto p = run_paths(c);
  auto info = build_dataset(p.data, c.dataset);
  json out = {{"dataset_digest", info.digest},
              {"train_records", info.train.records.size()},
              {"test_records", info.test.records.size()},
              {"train_container_digest", info.train.container_digest},
              {"test_container_digest", info.test.container_digest},
              {"normalizer", info.normalizer.to_json()}};
  write_run_record(p.data, c, "gen-data", out);
  return out;
}

json cmd_pretrain_encoder(const ExperimentConfig& c) {
  const auto p = run_paths(c);
  const auto data = open_dataset(c);
  auto encoder = make_encoder(c.encoder, c.encoder_seed);
  json out = {{"mode", c.encoder_mode}, {"init_seed", c.encoder_seed}};
  if (c.encoder_mode == "pretrained") {
    std::vector<Stack> train, heldout;
    const auto& n = data.normalizer;
    for (int i = 0; i < c.pretrain_scenes + c.pretrain_heldout; ++i) {
      const auto scene = generate_scene(c.pretrain_seed_base + static_cast<std::uint64_t>(i), c.dataset.scene);
      auto s = normalize_reflectance(scene.reflectance, n.band_lo, n.band_hi);
      (i < c.pretrain_scenes ? train : heldout).push_back(std::move(s));
    }
    if (heldout.empty()) heldout = train;
    auto result = mae_pretrain(encoder, train, heldout, c.dataset.crop.crop, c.pretrain);
    out["pretrain"] = c.pretrain.to_json();
    out["seed_range"] = {c.pretrain_seed_base, c.pretrain_seed_base + c.pretrain_scenes + c.pretrain_heldout};
    out["final_loss"] = result.losses.empty() ? json(nullptr) : json(result.losses.back());
    out["heldout_masked_mse"] = result.heldout_masked_mse;
    out["heldout_mean_baseline"] = result.heldout_mean_baseline;
    std::ostringstream csv;
    csv << "step,loss\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) csv << i + 1 << "," << std::setprecision(9) << result.losses[i] << "\n";
    fs::create_directories(p.encoder);
    write_text((fs::path(p.encoder) / "loss.csv").string(), csv.str());
  }
  encoder->freeze();
  fs::create_directories(p.encoder);
  save_encoder(encoder_file(p), encoder, out);
  out["checksum"] = encoder->checksum();
  out["weights_digest"] = file_digest(encoder_file(p));
  write_run_record(p.encoder, c, "pretrain-encoder", out);
  return out;
}

json cmd_train(const ExperimentConfig& c, const std::string& variant_name, const TrainOptions& options) {
  const auto v = parse_variant(variant_name);
  const auto p = run_paths(c);
  const auto data = open_dataset(c);
  const bool efm = v.conditioning == Conditioning::EfmCrossAttention;
  auto encoder = efm ? open_encoder(c, true) : ViTEncoder(nullptr);
  const auto dir = p.model_dir(v.name);
  const auto ckpt = p.checkpoint(v.name);
  if (fs::exists(ckpt) && !options.resume) {
    if (!options.overwrite)
      throw std::runtime_error("checkpoint exists at " + ckpt + "; pass --resume to continue or --overwrite to restart");
    fs::remove_all(dir);
  }
  const auto setup = make_train_setup(c, v, data.digest);
  BatchBuilder builder(data.train.scenes, data.normalizer, c.dataset.crop, v.conditioning, encoder);
  auto result = train(setup, builder, encoder, dir, options.resume, options.stop_after);
  json out = {{"variant", v.name},
              {"first_iteration", result.first_iteration},
              {"final_iteration", result.final_iteration},
              {"final_loss", result.losses.empty() ? json(nullptr) : json(result.losses.back())},
              {"learning_rate", setup.train.learning_rate},
              {"encoder_checksum_before", result.encoder_checksum_before},
              {"encoder_checksum_after", result.encoder_checksum_after},
              {"checkpoint", ckpt},
              {"checkpoint_digest", file_digest(ckpt)},
              {"dataset_digest", data.digest}};
  write_run_record(dir, c, "train", out);
  return out;
}

json cmd_sample(const ExperimentConfig& c, const std::string& variant, int steps, std::optional<std::uint64_t> seed) {
  EvalContext ctx(c);
  Method m = main_method(c, variant);
  if (steps > 0 && m.sampler != "regression") m.steps = steps;
  const std::uint64_t s = seed.value_or(c.sample_seed);
  json rec;
  const auto residuals = sample_residuals(ctx, m, s, &rec);
  std::vector<Field> preds;
  for (std::size_t i = 0; i < residuals.size(); ++i)
    preds.push_back(reconstruct(ctx.samples[i].upsampled, residuals[i], ctx.data.normalizer));
  std::ostringstream name;
  name << variant << "_" << m.sampler << m.steps << "_seed" << s;
  const auto dir = (fs::path(ctx.paths.samples) / name.str()).string();
  fs::create_directories(dir);
  const auto bin = (fs::path(dir) / "samples.bin").string();
  save_tensors(bin, {{"prediction", stack_fields(preds)}, {"residual_std", stack_fields(residuals)}});
  json out = {{"variant", variant},
              {"sampler", m.sampler},
              {"steps", m.steps},
              {"seed", s},
              {"eval_batch", c.eval_batch},
              {"patch_ids", patch_ids(ctx)},
              {"output", bin},
              {"output_digest", file_digest(bin)},
              {"dataset_digest", ctx.data.digest}};
  out.update(rec);
  write_run_record(dir, c, "sample", out);
  return out;
}

json cmd_eval(const ExperimentConfig& c) {
  EvalContext ctx(c);
  std::vector<MethodResult> results;
  std::vector<std::string> names{"bicubic"};
  names.insert(names.end(), c.variants.begin(), c.variants.end());
  for (const auto& name : names) {
    const auto m = main_method(c, name);
    json rec;
    const auto preds = predictions(ctx, m, &rec);
    results.push_back(score(ctx, m, preds, true));
    results.back().record = rec;
  }
  fs::create_directories(ctx.paths.eval);
  std::ostringstream csv;
  csv << "method,group,patches,rmse,rmse_masked,ssim,fed\n";
  // Grouped like the published table: one block per group, methods as rows.
  for (std::size_t g = 0; g < results.front().rows.size(); ++g)
    for (const auto& r : results) {
      const auto& row = r.rows[g];
      csv << r.method.name << "," << row.group << "," << row.patches << "," << opt_csv(row.rmse) << ","
          << opt_csv(row.rmse_masked) << "," << opt_csv(row.ssim) << "," << (row.group == "All" ? opt_csv(r.fed) : "")
          << "\n";
    }
  write_text((fs::path(ctx.paths.eval) / "table1.csv").string(), csv.str());
  TensorMap maps;
  json methods = json::array();
  for (const auto& r : results) {
    maps.emplace("map/" + r.method.name, to_tensor(r.map));
    methods.push_back(result_json(r));
  }
  const auto maps_path = (fs::path(ctx.paths.eval) / "maps.bin").string();
  save_tensors(maps_path, maps);
  json report = common_digests(ctx);
  report["methods"] = methods;
  report["scale"] = c.dataset.crop.scale;
  report["maps_digest"] = file_digest(maps_path);
  write_json((fs::path(ctx.paths.eval) / "report.json").string(), report);
  json out = {{"report_digest", file_digest((fs::path(ctx.paths.eval) / "report.json").string())},
              {"table1_digest", file_digest((fs::path(ctx.paths.eval) / "table1.csv").string())},
              {"maps_digest", report["maps_digest"]}};
  json brief = json::array();
  for (const auto& r : results)
    brief.push_back({{"method", r.method.name}, {"rmse", opt_json(r.rows.front().rmse)},
                     {"checkerboard", opt_json(r.checkerboard)}});
  out["methods"] = brief;
  write_run_record(ctx.paths.eval, c, "eval", out);
  return out;
}

json cmd_ablate_steps(const ExperimentConfig& c) {
  EvalContext ctx(c);
  std::vector<MethodResult> results;
  for (const auto& name : c.variants) {
    const auto v = parse_variant(name);
    std::vector<Method> methods;
    if (v.head == HeadMode::X0)
      for (int s : c.x0_steps) methods.push_back({name + "@shift" + std::to_string(s), name, "shift", s, s == c.shift_steps});
    if (v.head == HeadMode::Epsilon) {
      for (int s : c.eps_steps)
        if (s < c.vp_steps) methods.push_back({name + "@ddim" + std::to_string(s), name, "ddim", s, false});
      methods.push_back({name + "@ddpm" + std::to_string(c.vp_steps), name, "ddpm", c.vp_steps, true});
    }
    for (const auto& m : methods) {
      json rec;
      const auto preds = predictions(ctx, m, &rec);
      results.push_back(score(ctx, m, preds, true));
      results.back().record = rec;
    }
  }
  if (results.empty()) throw std::invalid_argument("ablate-steps: no x0 or eps variants configured");
  fs::create_directories(ctx.paths.ablate_steps);
  std::ostringstream csv;
  csv << "variant,steps,sampler,native,rmse,ssim,fed\n";
  json methods = json::array();
  for (const auto& r : results) {
    const auto& all = r.rows.front();
    csv << r.method.variant << "," << r.method.steps << (r.method.native ? "†" : "") << "," << r.method.sampler << ","
        << (r.method.native ? 1 : 0) << "," << opt_csv(all.rmse) << "," << opt_csv(all.ssim) << "," << opt_csv(r.fed)
        << "\n";
    methods.push_back(result_json(r));
  }
  const auto table = (fs::path(ctx.paths.ablate_steps) / "table3.csv").string();
  write_text(table, csv.str());
  json report = common_digests(ctx);
  report["methods"] = methods;
  write_json((fs::path(ctx.paths.ablate_steps) / "report.json").string(), report);
  json out = {{"table3_digest", file_digest(table)},
              {"report_digest", file_digest((fs::path(ctx.paths.ablate_steps) / "report.json").string())}};
  write_run_record(ctx.paths.ablate_steps, c, "ablate-steps", out);
  return out;
}

json cmd_ablate_cond(const ExperimentConfig& c) {
  const auto va = parse_variant(c.cond_baseline), vb = parse_variant(c.cond_model);
  if (va.head != vb.head) throw std::invalid_argument("ablate-cond: baseline and model must share a formulation");
  EvalContext ctx(c);
  const auto ma = main_method(c, va.name), mb = main_method(c, vb.name);
  json rec_a, rec_b;
  const auto pa = predictions(ctx, ma, &rec_a);
  const auto pb = predictions(ctx, mb, &rec_b);
  std::vector<PatchValue> ra, rb, cx;
  for (std::size_t i = 0; i < ctx.samples.size(); ++i) {
    const auto id = ctx.samples[i].seed;
    ra.push_back({id, rmse(pa[i], ctx.targets[i])});
    rb.push_back({id, rmse(pb[i], ctx.targets[i])});
    cx.push_back({id, scene_complexity(ctx.samples[i].reflectance)});
  }
  const auto analysis = delta_rmse_analysis(ra, rb, cx);
  // Upper tercile by complexity.
  std::vector<std::size_t> order(analysis.delta.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return analysis.complexity[x] < analysis.complexity[y]; });
  const std::size_t start = (2 * order.size()) / 3;
  double tercile_sum = 0;
  for (std::size_t k = start; k < order.size(); ++k) tercile_sum += analysis.delta[order[k]];
  const auto tercile_n = order.size() - start;
  const double tercile_mean = tercile_n ? tercile_sum / static_cast<double>(tercile_n) : 0.0;
  double mean_delta = 0;
  for (double d : analysis.delta) mean_delta += d;
  mean_delta /= static_cast<double>(analysis.delta.size());

  fs::create_directories(ctx.paths.ablate_cond);
  std::ostringstream csv;
  csv << "patch_id,complexity,rmse_baseline,rmse_model,delta\n";
  std::map<std::uint64_t, double> a_by_id, b_by_id;
  for (const auto& x : ra) a_by_id[x.id] = x.value;
  for (const auto& x : rb) b_by_id[x.id] = x.value;
  for (std::size_t i = 0; i < analysis.ids.size(); ++i)
    csv << analysis.ids[i] << "," << fmt(analysis.complexity[i]) << "," << fmt(a_by_id[analysis.ids[i]]) << ","
        << fmt(b_by_id[analysis.ids[i]]) << "," << fmt(analysis.delta[i]) << "\n";
  write_text((fs::path(ctx.paths.ablate_cond) / "delta.csv").string(), csv.str());
  std::ostringstream bins;
  bins << "lo,hi,count,mean,standard_error,less_stable\n";
  for (const auto& b : analysis.bins)
    bins << fmt(b.lo) << "," << fmt(b.hi) << "," << b.count << "," << (b.count ? fmt(b.mean) : "") << ","
         << (b.count > 1 ? fmt(b.standard_error) : "") << "," << (b.less_stable ? 1 : 0) << "\n";
  write_text((fs::path(ctx.paths.ablate_cond) / "bins.csv").string(), bins.str());
  TensorMap diffs;
  for (std::size_t i = 0; i < ctx.samples.size(); ++i) {
    diffs.emplace("diff/" + std::to_string(ctx.samples[i].seed), to_tensor(error_difference_map(pa[i], pb[i], ctx.targets[i])));
    diffs.emplace("target/" + std::to_string(ctx.samples[i].seed), to_tensor(ctx.targets[i]));
  }
  const auto diff_path = (fs::path(ctx.paths.ablate_cond) / "diffmaps.bin").string();
  save_tensors(diff_path, diffs);
  json report = common_digests(ctx);
  report["baseline"] = ma.name;
  report["model"] = mb.name;
  report["analysis"] = analysis.to_json();
  report["mean_delta"] = mean_delta;
  report["high_tercile"] = {{"count", tercile_n},
                            {"complexity_threshold", order.empty() ? 0.0 : analysis.complexity[order[start]]},
                            {"mean_delta", tercile_mean}};
  report["sampling"] = {{"baseline", rec_a}, {"model", rec_b}};
  report["diffmaps_digest"] = file_digest(diff_path);
  const auto report_path = (fs::path(ctx.paths.ablate_cond) / "analysis.json").string();
  write_json(report_path, report);
  json out = {{"analysis_digest", file_digest(report_path)},
              {"mean_delta", mean_delta},
              {"high_tercile_mean_delta", tercile_mean},
              {"correlation", opt_json(analysis.correlation)}};
  write_run_record(ctx.paths.ablate_cond, c, "ablate-cond", out);
  return out;
}

namespace {

Canvas scatter_plot(const DeltaAnalysis& a) {
  const int W = 480, H = 320, L = 40, R = 10, T = 10, B = 30;
  Canvas cv(W, H);
  double x0 = *std::min_element(a.complexity.begin(), a.complexity.end());
  double x1 = *std::max_element(a.complexity.begin(), a.complexity.end());
  double y0 = 0, y1 = 0;
  for (double d : a.delta) {
    y0 = std::min(y0, d);
    y1 = std::max(y1, d);
  }
  for (const auto& b : a.bins)
    if (b.count) {
      y0 = std::min(y0, b.mean - b.standard_error);
      y1 = std::max(y1, b.mean + b.standard_error);
    }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + static_cast<int>(std::lround((x - x0) / (x1 - x0) * (W - L - R))); };
  auto py = [&](double y) { return H - B - static_cast<int>(std::lround((y - y0) / (y1 - y0) * (H - T - B))); };
  const Rgb axis{0, 0, 0}, grid{200, 200, 200}, dot{70, 110, 180}, mean{200, 40, 40};
  cv.line(L, py(0.0), W - R, py(0.0), grid);
  cv.line(L, T, L, H - B, axis);
  cv.line(L, H - B, W - R, H - B, axis);
  for (std::size_t i = 0; i < a.delta.size(); ++i) {
    const int x = px(a.complexity[i]), y = py(a.delta[i]);
    cv.fill_rect(x - 1, y - 1, x + 1, y + 1, dot);
  }
  for (const auto& b : a.bins) {
    if (!b.count) continue;
    const int x = px(0.5 * (b.lo + b.hi));
    const Rgb c = b.less_stable ? Rgb{240, 150, 150} : mean;
    cv.line(x, py(b.mean - b.standard_error), x, py(b.mean + b.standard_error), c);
    cv.fill_rect(x - 2, py(b.mean) - 2, x + 2, py(b.mean) + 2, c);
  }
  return cv;
}

std::string safe_name(std::string s) {
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-') ch = '_';
  return s;
}

}  // namespace

json cmd_plot(const ExperimentConfig& c) {
  const auto p = run_paths(c);
  fs::create_directories(p.plots);
  json files = json::object();
  auto emit = [&](const std::string& name, const Canvas& cv) {
    const auto path = (fs::path(p.plots) / name).string();
    write_png(path, cv);
    files[name] = file_digest(path);
  };
  const auto maps_path = fs::path(p.eval) / "maps.bin";
  if (fs::exists(maps_path)) {
    std::vector<std::string> names;
    const auto maps = read_maps(maps_path.string(), "map/", &names);
    double hi = 0;
    for (const auto& m : maps)
      for (double v : m.values()) hi = std::max(hi, v);
    for (std::size_t i = 0; i < maps.size(); ++i)
      emit("rmse_map_" + safe_name(names[i]) + ".png", render_field(maps[i], 0.0, hi, Colormap::Heat, 6));
  }
  const auto analysis_path = fs::path(p.ablate_cond) / "analysis.json";
  if (fs::exists(analysis_path)) {
    const auto report = read_json(analysis_path.string());
    const auto a = DeltaAnalysis::from_json(report.at("analysis"));
    emit("delta_rmse_vs_complexity.png", scatter_plot(a));
    std::vector<std::size_t> order(a.delta.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return std::abs(a.delta[x]) > std::abs(a.delta[y]); });
    const auto diffs = load_tensors((fs::path(p.ablate_cond) / "diffmaps.bin").string());
    for (std::size_t k = 0; k < std::min<std::size_t>(4, order.size()); ++k) {
      const auto id = std::to_string(a.ids[order[k]]);
      const auto d = field_from_tensor(diffs.at("diff/" + id));
      double m = 1e-12;
      for (double v : d.values()) m = std::max(m, std::abs(v));
      emit("error_difference_" + id + ".png", render_field(d, -m, m, Colormap::Diverging, 6));
      const auto t = field_from_tensor(diffs.at("target/" + id));
      double lo = t.values()[0], hi = lo;
      for (double v : t.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      emit("target_" + id + ".png", render_field(t, lo, hi, Colormap::Heat, 6));
    }
  }
  if (files.empty()) throw std::runtime_error("plot: nothing to plot; run eval or ablate-cond first");
  json out = {{"files", files}};
  write_run_record(p.plots, c, "plot", out);
  return out;
}

}  // namespace efdiff
