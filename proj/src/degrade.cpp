#include "efdiff/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace efdiff {

GridSpec make_grid(int height, int width, int scale, double hr_spacing_m) {
  if (scale < 2) throw std::invalid_argument("grid: scale factor must be >= 2");
  if (height <= 0 || width <= 0 || height % scale != 0 || width % scale != 0)
    throw std::invalid_argument("grid: H and W must be positive multiples of the scale factor");
  GridSpec g;
  g.height = height;
  g.width = width;
  g.scale = scale;
  g.coarse_height = height / scale;
  g.coarse_width = width / scale;
  g.hr_spacing_m = hr_spacing_m;
  g.lr_spacing_m = hr_spacing_m * scale;
  return g;
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian kernel: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

void require_finite(const Field& f, const char* what) {
  if (!f.all_finite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

Field psf_blur(const Field& field, double sigma) {
  const auto k = gaussian_kernel_1d(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int H = field.height(), W = field.width();
  Field tmp(H, W), out(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      // Accumulate deviations from the centre tap so constants pass through exactly.
      const double ref = field(r, c);
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * (field(r, reflect_index(c + d, W)) - ref);
      tmp(r, c) = ref + acc;
    }
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double ref = tmp(r, c);
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * (tmp(reflect_index(r + d, H), c) - ref);
      out(r, c) = ref + acc;
    }
  return out;
}

Field block_average(const Field& field, int scale) {
  if (scale < 1 || field.height() % scale != 0 || field.width() % scale != 0)
    throw std::invalid_argument("block_average: shape not divisible by scale");
  const int h = field.height() / scale, w = field.width() / scale;
  Field out(h, w);
  const double inv = 1.0 / (static_cast<double>(scale) * scale);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double ref = field(i * scale, j * scale);
      double acc = 0.0;
      for (int r = 0; r < scale; ++r)
        for (int c = 0; c < scale; ++c) acc += field(i * scale + r, j * scale + c) - ref;
      out(i, j) = ref + acc * inv;
    }
  return out;
}

Field bicubic_upsample(const Field& coarse, int scale) {
  if (scale < 1) throw std::invalid_argument("bicubic_upsample: scale must be >= 1");
  const int h = coarse.height(), w = coarse.width();
  const int H = h * scale, W = w * scale;

  struct Taps {
    int index[4];
    double weight[4];
  };
  auto taps_for = [scale](int n_src, int n_dst) {
    std::vector<Taps> taps(n_dst);
    for (int i = 0; i < n_dst; ++i) {
      const double src = (i + 0.5) / scale - 0.5;
      const int base = static_cast<int>(std::floor(src));
      const double frac = src - base;
      for (int k = 0; k < 4; ++k) {
        taps[i].index[k] = std::clamp(base - 1 + k, 0, n_src - 1);
        taps[i].weight[k] = cubic_weight(frac - (k - 1));
      }
    }
    return taps;
  };
  const auto col_taps = taps_for(w, W);
  const auto row_taps = taps_for(h, H);

  Field tmp(h, W);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < W; ++c) {
      const double ref = coarse(r, col_taps[c].index[1]);
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += col_taps[c].weight[k] * (coarse(r, col_taps[c].index[k]) - ref);
      tmp(r, c) = ref + acc;
    }
  Field out(H, W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const double ref = tmp(row_taps[r].index[1], c);
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += row_taps[r].weight[k] * (tmp(row_taps[r].index[k], c) - ref);
      out(r, c) = ref + acc;
    }
  return out;
}

Degraded wald_degrade(const Field& target, int scale) {
  make_grid(target.height(), target.width(), scale);
  require_finite(target, "wald_degrade");
  const double sigma = static_cast<double>(scale) / std::numbers::pi;
  Degraded d;
  d.coarse = block_average(psf_blur(target, sigma), scale);
  d.upsampled = bicubic_upsample(d.coarse, scale);
  return d;
}

Field make_residual(const Field& target, const Field& upsampled) {
  if (!target.same_shape(upsampled)) throw std::invalid_argument("make_residual: shape mismatch");
  Field r(target.height(), target.width());
  auto out = r.values();
  auto y = target.values();
  auto x = upsampled.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = y[i] - x[i];
  return r;
}

Field add_residual(const Field& upsampled, const Field& residual) {
  if (!upsampled.same_shape(residual)) throw std::invalid_argument("add_residual: shape mismatch");
  Field y(upsampled.height(), upsampled.width());
  auto out = y.values();
  auto x = upsampled.values();
  auto r = residual.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + r[i];
  return y;
}

void MomentAccumulator::add(double x) {
  ++count_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_ += delta * (x - mean_);
}

void MomentAccumulator::add(std::span<const double> xs) {
  for (double x : xs) add(x);
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  const double n_a = static_cast<double>(count_), n_b = static_cast<double>(other.count_);
  const double n = n_a + n_b;
  const double delta = other.mean_ - mean_;
  mean_ += delta * n_b / n;
  m2_ += other.m2_ + delta * delta * n_a * n_b / n;
  count_ += other.count_;
}

double ResidualNormalizer::standardize(double r) const {
  if (!fitted()) throw std::logic_error("residual normalizer is not fitted");
  return (r - mu) / (3.0 * sigma);
}

double ResidualNormalizer::unstandardize(double r) const {
  if (!fitted()) throw std::logic_error("residual normalizer is not fitted");
  return r * 3.0 * sigma + mu;
}

Field ResidualNormalizer::standardize(const Field& residual) const {
  if (!fitted()) throw std::logic_error("residual normalizer is not fitted");
  Field out = residual;
  for (double& v : out.values()) v = (v - mu) / (3.0 * sigma);
  return out;
}

Field ResidualNormalizer::unstandardize(const Field& standardized) const {
  if (!fitted()) throw std::logic_error("residual normalizer is not fitted");
  Field out = standardized;
  for (double& v : out.values()) v = v * 3.0 * sigma + mu;
  return out;
}

nlohmann::json ResidualNormalizer::to_json() const {
  return {{"mu_R", mu},         {"sigma_R", sigma},           {"band_lo", band_lo},
          {"band_hi", band_hi}, {"thermal_mean", thermal_mean}, {"thermal_std", thermal_std}};
}

ResidualNormalizer ResidualNormalizer::from_json(const nlohmann::json& j) {
  ResidualNormalizer n;
  n.mu = j.at("mu_R");
  n.sigma = j.at("sigma_R");
  n.band_lo = j.at("band_lo").get<std::vector<double>>();
  n.band_hi = j.at("band_hi").get<std::vector<double>>();
  n.thermal_mean = j.value("thermal_mean", 0.0);
  n.thermal_std = j.value("thermal_std", 1.0);
  return n;
}

ResidualNormalizer fit_normalizer(std::span<const Field> training_residuals) {
  if (training_residuals.size() < 2) throw std::invalid_argument("fit_normalizer: need at least two fields");
  MomentAccumulator acc;
  for (const auto& f : training_residuals) {
    if (!f.all_finite()) throw std::invalid_argument("fit_normalizer: non-finite residual");
    acc.add(f.values());
  }
  const double var = acc.population_variance();
  if (!(var > 0.0)) throw std::invalid_argument("fit_normalizer: zero residual variance");
  ResidualNormalizer n;
  n.mu = acc.mean();
  n.sigma = std::sqrt(var);
  return n;
}

Stack normalize_reflectance(const Stack& stack, std::span<const double> lo, std::span<const double> hi) {
  if (static_cast<int>(lo.size()) != stack.bands() || static_cast<int>(hi.size()) != stack.bands())
    throw std::invalid_argument("normalize_reflectance: band range count mismatch");
  for (int b = 0; b < stack.bands(); ++b)
    if (!(hi[b] > lo[b])) throw std::invalid_argument("normalize_reflectance: degenerate band range");
  Stack out(stack.bands(), stack.height(), stack.width());
  for (int b = 0; b < stack.bands(); ++b) {
    const double span = hi[b] - lo[b];
    for (int r = 0; r < stack.height(); ++r)
      for (int c = 0; c < stack.width(); ++c)
        out(b, r, c) = std::clamp((stack(b, r, c) - lo[b]) / span, 0.0, 1.0);
  }
  return out;
}

}  // namespace efdiff
