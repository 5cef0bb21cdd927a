#include "efdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include "efdiff/digest.hpp"
#include "efdiff/tensor_file.hpp"

namespace efdiff {

const char* class_name(LandClass c) {
  switch (c) {
    case LandClass::Forest: return "forest";
    case LandClass::LowVegetation: return "low_vegetation";
    case LandClass::Water: return "water";
    case LandClass::Urban: return "urban";
  }
  return "unknown";
}

void SceneConfig::validate() const {
  if (size < 4) throw std::invalid_argument("scene: size too small");
  if (bands != kNumBands) throw std::invalid_argument("scene: band count must be 6");
  if (min_regions < 1 || max_regions < min_regions) throw std::invalid_argument("scene: bad region count range");
  if (reflectance_noise < 0 || texture_amplitude < 0 || trend_amplitude < 0 || region_offset_std < 0)
    throw std::invalid_argument("scene: negative noise level");
  if (!(boundary_sharpness > 0)) throw std::invalid_argument("scene: boundary sharpness must be positive");
  double weight_sum = 0.0;
  for (double w : class_weights) {
    if (w < 0) throw std::invalid_argument("scene: negative class weight");
    weight_sum += w;
  }
  if (!(weight_sum > 0)) throw std::invalid_argument("scene: all class weights are zero");
  for (int a = 0; a < kNumClasses; ++a)
    for (int b = a + 1; b < kNumClasses; ++b) {
      if (class_weights[a] == 0 || class_weights[b] == 0) continue;
      double d2 = 0.0;
      for (int k = 0; k < kNumBands; ++k) d2 += (spectra[a][k] - spectra[b][k]) * (spectra[a][k] - spectra[b][k]);
      if (!(std::sqrt(d2) > 2.0 * reflectance_noise))
        throw std::invalid_argument("scene: class spectra not separated by twice the reflectance noise");
      if (!(std::abs(temperatures[a] - temperatures[b]) > 2.0 * texture_amplitude))
        throw std::invalid_argument("scene: class temperatures not separated by twice the texture amplitude");
    }
}

nlohmann::json SceneConfig::to_json() const {
  return {{"size", size},
          {"bands", bands},
          {"spectra", spectra},
          {"temperatures", temperatures},
          {"class_weights", class_weights},
          {"min_regions", min_regions},
          {"max_regions", max_regions},
          {"warp_amplitude", warp_amplitude},
          {"warp_length", warp_length},
          {"boundary_sharpness", boundary_sharpness},
          {"region_offset_std", region_offset_std},
          {"trend_amplitude", trend_amplitude},
          {"trend_length", trend_length},
          {"texture_amplitude", texture_amplitude},
          {"texture_length", texture_length},
          {"reflectance_noise", reflectance_noise},
          {"band_correlation", band_correlation}};
}

SceneConfig SceneConfig::from_json(const nlohmann::json& j) {
  SceneConfig c;
  auto read = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  read("size", c.size);
  read("bands", c.bands);
  read("spectra", c.spectra);
  read("temperatures", c.temperatures);
  read("class_weights", c.class_weights);
  read("min_regions", c.min_regions);
  read("max_regions", c.max_regions);
  read("warp_amplitude", c.warp_amplitude);
  read("warp_length", c.warp_length);
  read("boundary_sharpness", c.boundary_sharpness);
  read("region_offset_std", c.region_offset_std);
  read("trend_amplitude", c.trend_amplitude);
  read("trend_length", c.trend_length);
  read("texture_amplitude", c.texture_amplitude);
  read("texture_length", c.texture_length);
  read("reflectance_noise", c.reflectance_noise);
  read("band_correlation", c.band_correlation);
  return c;
}

Field smooth_noise(int height, int width, double length, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Field white(height, width);
  for (double& v : white.values()) v = normal(rng);
  if (!(length > 0.0)) return white;
  const auto k = gaussian_kernel_1d(length);
  double sq = 0.0;
  for (double w : k) sq += w * w;
  Field out = psf_blur(white, length);
  const double inv_std = 1.0 / sq;  // 2-D separable variance is (sum k^2)^2
  for (double& v : out.values()) v *= inv_std;
  return out;
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int n = config.size;

  std::uniform_int_distribution<int> region_count(config.min_regions, config.max_regions);
  const int regions = region_count(rng);
  std::uniform_real_distribution<double> coord(0.0, static_cast<double>(n));
  std::discrete_distribution<int> pick_class(config.class_weights.begin(), config.class_weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);

  struct Site {
    double r, c;
    int cls;
    double offset;
  };
  std::vector<Site> sites(regions);
  for (auto& s : sites) {
    s.r = coord(rng);
    s.c = coord(rng);
    s.cls = pick_class(rng);
    s.offset = config.region_offset_std * normal(rng);
  }

  Field warp_r = smooth_noise(n, n, config.warp_length, rng);
  Field warp_c = smooth_noise(n, n, config.warp_length, rng);

  Scene scene;
  scene.seed = seed;
  scene.classes = Field(n, n);
  Field base(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double qr = r + 0.5 + config.warp_amplitude * warp_r(r, c);
      const double qc = c + 0.5 + config.warp_amplitude * warp_c(r, c);
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int i = 0; i < regions; ++i) {
        const double d = (sites[i].r - qr) * (sites[i].r - qr) + (sites[i].c - qc) * (sites[i].c - qc);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      scene.classes(r, c) = sites[best].cls;
      base(r, c) = config.temperatures[sites[best].cls] + sites[best].offset;
    }

  // Reflectance: class spectrum plus band-correlated pixel noise.
  scene.reflectance = Stack(config.bands, n, n);
  const double rho = config.band_correlation;
  const double indep = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const int cls = static_cast<int>(scene.classes(r, c));
      const double common = normal(rng);
      for (int b = 0; b < config.bands; ++b) {
        const double e = rho * common + indep * normal(rng);
        scene.reflectance(b, r, c) = config.spectra[cls][b] + config.reflectance_noise * e;
      }
    }

  // Thermal: boundary-aligned class temperatures, regional trend, texture.
  const double edge_sigma = 1.0 / config.boundary_sharpness;
  Field sharp = edge_sigma >= 0.2 ? psf_blur(base, edge_sigma) : base;
  Field trend = smooth_noise(n, n, config.trend_length, rng);
  Field texture = smooth_noise(n, n, config.texture_length, rng);
  scene.thermal = Field(n, n);
  auto y = scene.thermal.values();
  auto s = sharp.values();
  auto tr = trend.values();
  auto tx = texture.values();
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = s[i] + config.trend_amplitude * tr[i] + config.texture_amplitude * tx[i];
  return scene;
}

std::pair<int, int> center_crop_offset(int size, int crop) {
  if (crop > size || crop <= 0) throw std::invalid_argument("center crop larger than scene");
  return {(size - crop) / 2, (size - crop) / 2};
}

Sample make_sample(const Scene& scene, int top, int left, const CropPolicy& policy,
                   const ResidualNormalizer& normalizer) {
  Sample s;
  s.seed = scene.seed;
  s.top = top;
  s.left = left;
  s.target = scene.thermal.crop(top, left, policy.crop, policy.crop);
  s.classes = scene.classes.crop(top, left, policy.crop, policy.crop);
  auto degraded = wald_degrade(s.target, policy.scale);
  s.coarse = std::move(degraded.coarse);
  s.upsampled = std::move(degraded.upsampled);
  s.residual = make_residual(s.target, s.upsampled);
  s.residual_std = normalizer.standardize(s.residual);
  s.reflectance = normalize_reflectance(scene.reflectance.crop(top, left, policy.crop, policy.crop),
                                        normalizer.band_lo, normalizer.band_hi);
  return s;
}

EvaluationGroups default_groups() {
  EvaluationGroups g;
  g.names = {"Forest", "Low Vegetation", "Water"};
  g.group_of_class = {0, 1, 2, 1};  // urban reports under Low Vegetation
  return g;
}

GroupMasks per_class_masks(const Field& classes, const EvaluationGroups& groups) {
  GroupMasks out;
  out.masks.assign(groups.names.size(), std::vector<bool>(classes.size(), false));
  std::array<std::int64_t, kNumClasses> counts{};
  auto v = classes.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const int cls = static_cast<int>(v[i]);
    if (cls < 0 || cls >= kNumClasses || static_cast<double>(cls) != v[i])
      throw std::invalid_argument("per_class_masks: unknown class id");
    ++counts[cls];
    out.masks[groups.group_of_class[cls]][i] = true;
  }
  out.majority_class = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  out.patch_group = groups.group_of_class[out.majority_class];
  return out;
}

Field classify_by_spectrum(const Stack& reflectance, const SceneConfig& config) {
  Field out(reflectance.height(), reflectance.width());
  for (int r = 0; r < reflectance.height(); ++r)
    for (int c = 0; c < reflectance.width(); ++c) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < kNumClasses; ++k) {
        double d = 0.0;
        for (int b = 0; b < reflectance.bands(); ++b) {
          const double e = reflectance(b, r, c) - config.spectra[k][b];
          d += e * e;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      out(r, c) = best;
    }
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records)
    recs.push_back({{"seed", r.seed}, {"offset", r.offset}, {"class_histogram", r.class_histogram}});
  return {{"split", split},
          {"seed_range", {seed_begin, seed_end}},
          {"records", recs},
          {"normalizer", normalizer_file},
          {"crop_policy", crop_policy},
          {"container_digest", container_digest}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.split = j.at("split");
  m.seed_begin = j.at("seed_range").at(0);
  m.seed_end = j.at("seed_range").at(1);
  for (const auto& r : j.at("records")) {
    SplitRecord rec;
    rec.seed = r.at("seed");
    rec.offset = r.at("offset");
    rec.class_histogram = r.at("class_histogram").get<std::array<std::int64_t, kNumClasses>>();
    m.records.push_back(rec);
  }
  m.normalizer_file = j.at("normalizer");
  m.crop_policy = j.at("crop_policy");
  m.container_digest = j.at("container_digest");
  return m;
}

nlohmann::json DatasetSpec::to_json() const {
  return {{"n_train", n_train},
          {"n_test", n_test},
          {"train_seed_base", train_seed_base},
          {"test_seed_base", test_seed_base},
          {"scene", scene.to_json()},
          {"crop", crop.crop},
          {"scale", crop.scale}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.n_train = j.value("n_train", s.n_train);
  s.n_test = j.value("n_test", s.n_test);
  s.train_seed_base = j.value("train_seed_base", s.train_seed_base);
  s.test_seed_base = j.value("test_seed_base", s.test_seed_base);
  if (j.contains("scene")) s.scene = SceneConfig::from_json(j.at("scene"));
  s.crop.crop = j.value("crop", s.crop.crop);
  s.crop.scale = j.value("scale", s.crop.scale);
  return s;
}

namespace {

void round_to_float(Field& f) {
  for (double& v : f.values()) v = static_cast<double>(static_cast<float>(v));
}
void round_to_float(Stack& s) {
  for (double& v : s.values()) v = static_cast<double>(static_cast<float>(v));
}

TensorMap scenes_to_tensors(const std::vector<Scene>& scenes) {
  const auto n = static_cast<std::int64_t>(scenes.size());
  const int size = scenes.front().thermal.height();
  const int bands = scenes.front().reflectance.bands();
  auto thermal = torch::empty({n, size, size}, torch::kFloat32);
  auto refl = torch::empty({n, bands, size, size}, torch::kFloat32);
  auto classes = torch::empty({n, size, size}, torch::kFloat32);
  auto seeds = torch::empty({n}, torch::kInt64);
  for (std::int64_t i = 0; i < n; ++i) {
    thermal[i].copy_(to_tensor(scenes[i].thermal));
    refl[i].copy_(to_tensor(scenes[i].reflectance));
    classes[i].copy_(to_tensor(scenes[i].classes));
    seeds[i] = static_cast<std::int64_t>(scenes[i].seed);
  }
  return {{"thermal", thermal}, {"reflectance", refl}, {"classes", classes}, {"seeds", seeds}};
}

DatasetManifest make_manifest(const std::string& split, std::uint64_t seed_begin, const std::vector<Scene>& scenes) {
  DatasetManifest m;
  m.split = split;
  m.seed_begin = seed_begin;
  m.seed_end = seed_begin + scenes.size();
  m.crop_policy = split == "train" ? "random" : "center";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    SplitRecord rec;
    rec.seed = scenes[i].seed;
    rec.offset = static_cast<std::int64_t>(i);
    for (double v : scenes[i].classes.values()) ++rec.class_histogram[static_cast<int>(v)];
    m.records.push_back(rec);
  }
  return m;
}

}  // namespace

ResidualNormalizer fit_dataset_normalizer(const std::vector<Scene>& train, const CropPolicy& policy) {
  if (train.empty()) throw std::invalid_argument("fit_dataset_normalizer: empty training split");
  std::vector<Field> residuals;
  MomentAccumulator thermal;
  const int bands = train.front().reflectance.bands();
  std::vector<double> lo(bands, std::numeric_limits<double>::infinity());
  std::vector<double> hi(bands, -std::numeric_limits<double>::infinity());
  for (const auto& scene : train) {
    auto [top, left] = center_crop_offset(scene.thermal.height(), policy.crop);
    auto y = scene.thermal.crop(top, left, policy.crop, policy.crop);
    auto d = wald_degrade(y, policy.scale);
    residuals.push_back(make_residual(y, d.upsampled));
    thermal.add(d.upsampled.values());
    for (int b = 0; b < bands; ++b)
      for (int r = 0; r < scene.reflectance.height(); ++r)
        for (int c = 0; c < scene.reflectance.width(); ++c) {
          lo[b] = std::min(lo[b], scene.reflectance(b, r, c));
          hi[b] = std::max(hi[b], scene.reflectance(b, r, c));
        }
  }
  ResidualNormalizer n = fit_normalizer(residuals);
  n.band_lo = lo;
  n.band_hi = hi;
  n.thermal_mean = thermal.mean();
  n.thermal_std = std::sqrt(thermal.population_variance());
  if (!(n.thermal_std > 0)) n.thermal_std = 1.0;
  return n;
}

DatasetInfo build_dataset(const std::string& dir, const DatasetSpec& spec) {
  if (spec.n_train < 1 || spec.n_test < 1) throw std::invalid_argument("build_dataset: need n_train, n_test >= 1");
  spec.scene.validate();
  make_grid(spec.crop.crop, spec.crop.crop, spec.crop.scale);
  center_crop_offset(spec.scene.size, spec.crop.crop);
  auto train_end = spec.train_seed_base + static_cast<std::uint64_t>(spec.n_train);
  auto test_end = spec.test_seed_base + static_cast<std::uint64_t>(spec.n_test);
  if (spec.train_seed_base < test_end && spec.test_seed_base < train_end)
    throw std::invalid_argument("build_dataset: train and test seed ranges overlap");

  auto generate = [&](std::uint64_t base, int count) {
    std::vector<Scene> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      auto s = generate_scene(base + static_cast<std::uint64_t>(i), spec.scene);
      round_to_float(s.thermal);
      round_to_float(s.reflectance);
      out.push_back(std::move(s));
    }
    return out;
  };
  auto train = generate(spec.train_seed_base, spec.n_train);
  auto test = generate(spec.test_seed_base, spec.n_test);

  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string train_bin = (fs::path(dir) / "train.bin").string();
  const std::string test_bin = (fs::path(dir) / "test.bin").string();

  DatasetInfo info;
  info.normalizer = fit_dataset_normalizer(train, spec.crop);
  try {
    save_tensors(train_bin, scenes_to_tensors(train));
    save_tensors(test_bin, scenes_to_tensors(test));
    info.train = make_manifest("train", spec.train_seed_base, train);
    info.test = make_manifest("test", spec.test_seed_base, test);
    info.train.container_digest = file_digest(train_bin);
    info.test.container_digest = file_digest(test_bin);
    info.digest = Digest().update(info.train.container_digest).update(info.test.container_digest).hex();
    write_json((fs::path(dir) / "train.json").string(), info.train.to_json());
    write_json((fs::path(dir) / "test.json").string(), info.test.to_json());
    write_json((fs::path(dir) / "normalizer.json").string(), info.normalizer.to_json());
    write_json((fs::path(dir) / "dataset.json").string(), {{"spec", spec.to_json()}, {"digest", info.digest}});
  } catch (...) {
    std::error_code ec;
    for (const char* name : {"train.bin", "test.bin", "train.json", "test.json", "normalizer.json", "dataset.json"})
      fs::remove(fs::path(dir) / name, ec);
    throw;
  }
  return info;
}

SceneSplit load_split(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  SceneSplit out;
  out.manifest = DatasetManifest::from_json(read_json((fs::path(dir) / (split + ".json")).string()));
  auto tensors = load_tensors((fs::path(dir) / (split + ".bin")).string());
  const auto& thermal = tensors.at("thermal");
  const auto& refl = tensors.at("reflectance");
  const auto& classes = tensors.at("classes");
  const auto& seeds = tensors.at("seeds");
  const auto n = thermal.size(0);
  if (static_cast<std::size_t>(n) != out.manifest.records.size())
    throw std::runtime_error("dataset: manifest record count does not match container for split " + split);
  for (std::int64_t i = 0; i < n; ++i) {
    Scene s;
    s.seed = static_cast<std::uint64_t>(seeds[i].item<std::int64_t>());
    s.thermal = field_from_tensor(thermal[i]);
    s.reflectance = stack_from_tensor(refl[i]);
    s.classes = field_from_tensor(classes[i]);
    out.scenes.push_back(std::move(s));
  }
  return out;
}

LoadedDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(fs::path(dir) / "dataset.json")) throw std::runtime_error("no dataset at " + dir);
  LoadedDataset d;
  auto meta = read_json((fs::path(dir) / "dataset.json").string());
  d.spec = DatasetSpec::from_json(meta.at("spec"));
  d.digest = meta.at("digest");
  d.normalizer = ResidualNormalizer::from_json(read_json((fs::path(dir) / "normalizer.json").string()));
  d.train = load_split(dir, "train");
  d.test = load_split(dir, "test");
  return d;
}

}  // namespace efdiff
