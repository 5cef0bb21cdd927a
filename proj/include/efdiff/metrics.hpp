#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "efdiff/encoder.hpp"
#include "efdiff/field.hpp"

namespace efdiff {

double rmse(const Field& pred, const Field& target);
// Only pixels with mask[i] set; throws on an empty mask.
double rmse(const Field& pred, const Field& target, const std::vector<bool>& mask);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Gaussian-window SSIM averaged over all fully contained windows.
/// dynamic_range is L in C1 = (k1 L)^2, C2 = (k2 L)^2.
double ssim(const Field& pred, const Field& target, double dynamic_range, const SsimOptions& options = {});

/// sqrt of the squared error at each position, averaged over patches.
Field per_pixel_rmse_map(std::span<const Field> predictions, std::span<const Field> targets);

/// Mean map value on coarse-block boundary pixels (row or column index
/// mod s in {0, s-1}) over the mean on interior pixels. Empty when the
/// interior mean is zero.
std::optional<double> checkerboard_score(const Field& map, int scale);

/// Mean forward-difference gradient magnitude over bands and pixels; the
/// last row and column (no forward neighbour) are excluded.
double scene_complexity(const Stack& reflectance);

std::optional<double> pearson_correlation(std::span<const double> x, std::span<const double> y);

struct PatchValue {
  std::uint64_t id = 0;
  double value = 0.0;
};

struct ComplexityBin {
  double lo = 0.0, hi = 0.0;
  int count = 0;
  double mean = 0.0;
  double standard_error = 0.0;  // 0 for bins with fewer than two patches
  bool less_stable = false;     // fewer than min_count patches
};

struct DeltaAnalysis {
  std::vector<std::uint64_t> ids;
  std::vector<double> delta;       // rmse_a - rmse_b per patch
  std::vector<double> complexity;
  std::vector<ComplexityBin> bins;
  std::optional<double> correlation;  // Pearson(delta, complexity)

  nlohmann::json to_json() const;
  static DeltaAnalysis from_json(const nlohmann::json& j);
};

/// Aligns the three per-patch series by id (throws if the id sets differ),
/// bins delta = A - B by complexity into equal-width bins.
DeltaAnalysis delta_rmse_analysis(std::span<const PatchValue> rmse_a, std::span<const PatchValue> rmse_b,
                                  std::span<const PatchValue> complexity, int bins = 20, int min_count = 5);

/// |pred_a - target| - |pred_b - target|; positive where B is better.
Field error_difference_map(const Field& pred_a, const Field& pred_b, const Field& target);

struct FrechetResult {
  double value = 0.0;
  bool mean_only = false;  // too few samples for a covariance
};

/// Frechet distance between Gaussians fitted to the rows of each feature set.
FrechetResult frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
double frechet_distance_gaussians(const std::vector<double>& mean_a, const std::vector<std::vector<double>>& cov_a,
                                  const std::vector<double>& mean_b, const std::vector<std::vector<double>>& cov_b);

/// Maps thermal fields to encoder inputs (scaled by [lo, hi] into [0,1] and
/// repeated over the bands), mean-pools the tokens to one vector per field.
std::vector<std::vector<double>> pooled_embeddings(ViTEncoder& encoder, std::span<const Field> fields, double lo,
                                                   double hi);
FrechetResult embedding_frechet_distance(ViTEncoder& encoder, std::span<const Field> a, std::span<const Field> b,
                                         double lo, double hi);

}  // namespace efdiff
