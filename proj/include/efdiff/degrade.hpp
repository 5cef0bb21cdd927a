#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "efdiff/field.hpp"

namespace efdiff {

struct GridSpec {
  int height = 0;        // H
  int width = 0;         // W
  int coarse_height = 0; // h
  int coarse_width = 0;  // w
  int scale = 0;         // s
  double hr_spacing_m = 30.0;
  double lr_spacing_m = 0.0;
};

// Validates H = s*h, W = s*w, s >= 2.
GridSpec make_grid(int height, int width, int scale, double hr_spacing_m = 30.0);

// Unit-sum Gaussian taps on [-ceil(3 sigma), ceil(3 sigma)].
std::vector<double> gaussian_kernel_1d(double sigma);
// Separable Gaussian blur with reflect (mirror, edge not repeated) boundaries.
Field psf_blur(const Field& field, double sigma);
Field block_average(const Field& field, int scale);
// Catmull-Rom (a = -0.5) upsampling with clamped edge sampling and
// half-pixel-centred alignment.
Field bicubic_upsample(const Field& coarse, int scale);

struct Degraded {
  Field coarse;      // X, h x w
  Field upsampled;   // X_tilde, H x W
};

// Reduced-resolution protocol: PSF blur (sigma = s/pi), s x s area average,
// bicubic back to the fine grid.
Degraded wald_degrade(const Field& target, int scale);

Field make_residual(const Field& target, const Field& upsampled);
Field add_residual(const Field& upsampled, const Field& residual);

// Mergeable single-pass moment accumulator (Chan et al. parallel update).
class MomentAccumulator {
 public:
  void add(double x);
  void add(std::span<const double> xs);
  void merge(const MomentAccumulator& other);
  long long count() const { return count_; }
  double mean() const { return mean_; }
  double population_variance() const { return count_ > 0 ? m2_ / static_cast<double>(count_) : 0.0; }

 private:
  long long count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

struct ResidualNormalizer {
  double mu = 0.0;
  double sigma = 0.0;  // 0 means not fitted
  std::vector<double> band_lo;
  std::vector<double> band_hi;
  // Affine scaling applied to X_tilde before it enters a network.
  double thermal_mean = 0.0;
  double thermal_std = 1.0;

  bool fitted() const { return sigma > 0.0; }

  Field standardize(const Field& residual) const;    // (R - mu) / (3 sigma)
  Field unstandardize(const Field& standardized) const;
  double standardize(double r) const;
  double unstandardize(double r) const;

  nlohmann::json to_json() const;
  static ResidualNormalizer from_json(const nlohmann::json& j);
};

ResidualNormalizer fit_normalizer(std::span<const Field> training_residuals);

Stack normalize_reflectance(const Stack& stack, std::span<const double> lo, std::span<const double> hi);

}  // namespace efdiff
