#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "efdiff/degrade.hpp"
#include "efdiff/field.hpp"

namespace efdiff {

enum class LandClass : int { Forest = 0, LowVegetation = 1, Water = 2, Urban = 3 };
inline constexpr int kNumClasses = 4;
inline constexpr int kNumBands = 6;

const char* class_name(LandClass c);

struct SceneConfig {
  int size = 72;
  int bands = kNumBands;
  // Mean reflectance per class (blue, green, red, nir, swir1, swir2).
  std::array<std::array<double, kNumBands>, kNumClasses> spectra{{
      {0.03, 0.05, 0.03, 0.35, 0.16, 0.07},  // forest
      {0.06, 0.10, 0.09, 0.28, 0.27, 0.16},  // low vegetation
      {0.07, 0.06, 0.04, 0.02, 0.01, 0.005}, // water
      {0.15, 0.16, 0.17, 0.21, 0.24, 0.22},  // urban
  }};
  std::array<double, kNumClasses> temperatures{24.0, 31.0, 17.0, 38.0};  // degC
  std::array<double, kNumClasses> class_weights{0.3, 0.35, 0.15, 0.2};
  int min_regions = 3;
  int max_regions = 14;
  double warp_amplitude = 4.0;     // px displacement of the Voronoi metric
  double warp_length = 6.0;        // px correlation length of the warp
  double boundary_sharpness = 2.0; // 1 / (blur sigma in px) of class temperatures
  double region_offset_std = 0.8;  // degC, per-region temperature offset
  double trend_amplitude = 1.5;    // degC, low-frequency regional trend
  double trend_length = 24.0;      // px
  double texture_amplitude = 0.6;  // degC
  double texture_length = 1.5;     // px
  double reflectance_noise = 0.012;
  double band_correlation = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
};

struct Scene {
  std::uint64_t seed = 0;
  Field thermal;     // Y
  Stack reflectance; // S (raw reflectance)
  Field classes;     // class id per pixel
};

Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Unit-variance spatially correlated Gaussian noise (blurred white noise).
Field smooth_noise(int height, int width, double length, std::mt19937_64& rng);

struct CropPolicy {
  int crop = 64;
  int scale = 8;
};

// (top, left) of the centred crop.
std::pair<int, int> center_crop_offset(int size, int crop);

// One model-ready example built from a scene crop.
struct Sample {
  std::uint64_t seed = 0;
  int top = 0, left = 0;
  Field target;               // Y crop
  Field coarse;               // X
  Field upsampled;            // X_tilde
  Field residual;             // R (physical units)
  Field residual_std;         // R'
  Stack reflectance;          // normalized to [0,1]
  Field classes;
};

Sample make_sample(const Scene& scene, int top, int left, const CropPolicy& policy,
                   const ResidualNormalizer& normalizer);

struct EvaluationGroups {
  std::vector<std::string> names;                 // Forest, Low Vegetation, Water
  std::array<int, kNumClasses> group_of_class{};  // class id -> group index
};
EvaluationGroups default_groups();

struct GroupMasks {
  std::vector<std::vector<bool>> masks;  // one per group, H*W
  int patch_group = -1;                  // group of the majority class
  int majority_class = -1;
};
GroupMasks per_class_masks(const Field& classes, const EvaluationGroups& groups);

// Nearest-mean-spectrum classification of raw reflectance.
Field classify_by_spectrum(const Stack& reflectance, const SceneConfig& config);

struct SplitRecord {
  std::uint64_t seed = 0;
  std::int64_t offset = 0;  // index along the leading axis of the split container
  std::array<std::int64_t, kNumClasses> class_histogram{};
};

struct DatasetManifest {
  std::string split;  // train | test
  std::uint64_t seed_begin = 0, seed_end = 0;  // half-open
  std::vector<SplitRecord> records;
  std::string normalizer_file = "normalizer.json";
  std::string crop_policy;  // "random" for train reads, "center" for evaluation reads
  std::string container_digest;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

struct DatasetSpec {
  int n_train = 200;
  int n_test = 40;
  std::uint64_t train_seed_base = 1'000;
  std::uint64_t test_seed_base = 9'000'000;
  SceneConfig scene;
  CropPolicy crop;

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

struct DatasetInfo {
  DatasetManifest train, test;
  ResidualNormalizer normalizer;
  std::string digest;
};

// Writes train.bin/test.bin containers, train.json/test.json manifests,
// normalizer.json and dataset.json into dir.
DatasetInfo build_dataset(const std::string& dir, const DatasetSpec& spec);

// Normalizer fitted from centre crops of the given training scenes.
ResidualNormalizer fit_dataset_normalizer(const std::vector<Scene>& train, const CropPolicy& policy);

struct SceneSplit {
  DatasetManifest manifest;
  std::vector<Scene> scenes;
};

struct LoadedDataset {
  DatasetSpec spec;
  ResidualNormalizer normalizer;
  SceneSplit train, test;
  std::string digest;
};

LoadedDataset load_dataset(const std::string& dir);
SceneSplit load_split(const std::string& dir, const std::string& split);

}  // namespace efdiff
