#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "efdiff/metrics.hpp"

using namespace efdiff;

namespace {

Field random_field(int h, int w, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Field f(h, w);
  for (auto& v : f.values()) v = n(rng);
  return f;
}

// Direct 2-D windowed SSIM over every fully contained window.
double ssim_brute(const Field& x, const Field& y, double L, int win, double sigma) {
  const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
  std::vector<double> g(win);
  double gs = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  double total = 0;
  int n = 0;
  for (int r = 0; r + win <= x.height(); ++r)
    for (int c = 0; c + win <= x.width(); ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double w = g[i] * g[j], a = x(r + i, c + j), b = y(r + i, c + j);
          mx += w * a;
          my += w * b;
          xx += w * a * a;
          yy += w * b * b;
          xy += w * a * b;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++n;
    }
  return total / n;
}

std::vector<std::vector<double>> column(std::initializer_list<double> v) {
  std::vector<std::vector<double>> rows;
  for (double x : v) rows.push_back({x});
  return rows;
}

}  // namespace

TEST_CASE("rmse") {
  Field a(2, 2, 1.0), b(2, 2, 1.0);
  CHECK(rmse(a, a) == 0.0);
  b(0, 0) = 3.0;
  CHECK(rmse(a, b) == doctest::Approx(1.0));
  CHECK((rmse(a, b, {true, false, false, false}) == doctest::Approx(2.0)));
  CHECK((rmse(a, b, {false, true, true, true}) == 0.0));
  CHECK_THROWS(rmse(a, b, {false, false, false, false}));
  CHECK_THROWS(rmse(a, Field(2, 3)));
}

TEST_CASE("ssim against a brute-force window oracle") {
  const auto x = random_field(24, 20, 1);
  auto y = x;
  const auto noise = random_field(24, 20, 2, 0.3);
  for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] += noise.values()[i];
  CHECK(ssim(x, x, 4.0) == doctest::Approx(1.0).epsilon(1e-12));
  const double fast = ssim(x, y, 4.0), slow = ssim_brute(x, y, 4.0, 11, 1.5);
  CHECK(fast == doctest::Approx(slow).epsilon(1e-10));
  CHECK(fast < 1.0);
  CHECK(fast > -1.0);
  SsimOptions small;
  small.window = 5;
  small.sigma = 1.0;
  CHECK(ssim(x, y, 4.0, small) == doctest::Approx(ssim_brute(x, y, 4.0, 5, 1.0)).epsilon(1e-10));
  CHECK_THROWS(ssim(Field(8, 8), Field(8, 8), 1.0));
  CHECK_THROWS(ssim(x, y, 0.0));
}

TEST_CASE("per-pixel rmse map") {
  std::vector<Field> p{Field(2, 2, 1.0), Field(2, 2, 3.0)};
  std::vector<Field> t{Field(2, 2, 0.0), Field(2, 2, 0.0)};
  const auto m = per_pixel_rmse_map(p, t);
  for (double v : m.values()) CHECK(v == doctest::Approx(std::sqrt(5.0)));
  CHECK_THROWS(per_pixel_rmse_map(p, std::span<const Field>(t.data(), 1)));
}

TEST_CASE("checkerboard score") {
  Field flat(16, 16, 2.0);
  CHECK(*checkerboard_score(flat, 8) == doctest::Approx(1.0));
  Field edges(16, 16, 1.0);
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c)
      if (r % 8 == 0 || r % 8 == 7 || c % 8 == 0 || c % 8 == 7) edges(r, c) = 3.0;
  CHECK(*checkerboard_score(edges, 8) == doctest::Approx(3.0));
  CHECK(!checkerboard_score(Field(16, 16, 0.0), 8).has_value());
  CHECK_THROWS(checkerboard_score(flat, 2));
}

TEST_CASE("scene complexity") {
  Stack s(2, 3, 3);
  CHECK(scene_complexity(s) == 0.0);
  // Band 0 ramps by 1 per column: forward gradient magnitude 1 everywhere.
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) s(0, r, c) = c;
  CHECK(scene_complexity(s) == doctest::Approx(0.5));
  // Add a row ramp of 1 to band 1 and column ramp to band 1: magnitude sqrt 2.
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) s(1, r, c) = r + c;
  CHECK(scene_complexity(s) == doctest::Approx((1.0 + std::sqrt(2.0)) / 2));
  CHECK_THROWS(scene_complexity(Stack(1, 1, 4)));
}

TEST_CASE("pearson correlation") {
  std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1}, c{1, 1, 1, 1};
  CHECK(*pearson_correlation(x, y) == doctest::Approx(1.0));
  CHECK(*pearson_correlation(x, z) == doctest::Approx(-1.0));
  CHECK(!pearson_correlation(x, c).has_value());
}

TEST_CASE("delta analysis aligns by id and bins by complexity") {
  std::vector<PatchValue> a, b, cx;
  for (int i = 0; i < 12; ++i) {
    a.push_back({static_cast<std::uint64_t>(i), 1.0 + 0.1 * i});
    b.push_back({static_cast<std::uint64_t>(11 - i), 1.0});
    cx.push_back({static_cast<std::uint64_t>(i), static_cast<double>(i)});
  }
  const auto r = delta_rmse_analysis(a, b, cx, 3, 5);
  REQUIRE(r.ids.size() == 12);
  for (std::size_t k = 0; k < 12; ++k) CHECK(r.delta[k] == doctest::Approx(0.1 * r.ids[k]));
  CHECK(*r.correlation == doctest::Approx(1.0));
  REQUIRE(r.bins.size() == 3);
  int total = 0;
  for (const auto& bin : r.bins) total += bin.count;
  CHECK(total == 12);
  CHECK(r.bins[0].lo == 0.0);
  CHECK(r.bins[2].hi == 11.0);
  CHECK(r.bins[0].count == 4);
  CHECK(r.bins[0].mean == doctest::Approx(0.15));
  CHECK(r.bins[0].less_stable);
  // Standard error of {0, .1, .2, .3}: sd / sqrt(4).
  CHECK(r.bins[0].standard_error == doctest::Approx(std::sqrt(0.05 / 3) / 2));
  const auto back = DeltaAnalysis::from_json(r.to_json());
  CHECK(back.delta == r.delta);
  CHECK(back.bins.size() == 3);

  auto missing = b;
  missing.pop_back();
  CHECK_THROWS(delta_rmse_analysis(a, missing, cx));
  auto dup = a;
  dup[1].id = 0;
  CHECK_THROWS(delta_rmse_analysis(dup, b, cx));
}

TEST_CASE("error difference map is antisymmetric") {
  const auto t = random_field(6, 6, 3), p = random_field(6, 6, 4), q = random_field(6, 6, 5);
  const auto d1 = error_difference_map(p, q, t), d2 = error_difference_map(q, p, t);
  for (std::size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1.values()[i] == -d2.values()[i]);
    CHECK(d1.values()[i] == std::abs(p.values()[i] - t.values()[i]) - std::abs(q.values()[i] - t.values()[i]));
  }
}

TEST_CASE("Frechet distance hand cases") {
  // Means 0 vs 1, unit variances.
  CHECK(frechet_distance_gaussians({0.0}, {{1.0}}, {1.0}, {{1.0}}) == doctest::Approx(1.0).epsilon(1e-12));
  // Equal means, variances 1 vs 4: 1 + 4 - 2 * 2.
  CHECK(frechet_distance_gaussians({0.0}, {{1.0}}, {0.0}, {{4.0}}) == doctest::Approx(1.0).epsilon(1e-12));
  // Diagonal 2-D case sums per-axis terms.
  CHECK(frechet_distance_gaussians({0, 0}, {{1, 0}, {0, 9}}, {1, 2}, {{4, 0}, {0, 1}}) ==
        doctest::Approx(1 + 4 + (1 + 4 - 4) + (9 + 1 - 6)).epsilon(1e-12));

  // From samples: {-1, 1} has mean 0 and sample variance 2.
  const auto r = frechet_distance(column({-1, 1}), column({0, 2}));
  CHECK(r.value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(!r.mean_only);
  const auto one = frechet_distance(column({3}), column({1}));
  CHECK(one.mean_only);
  CHECK(one.value == doctest::Approx(4.0));
}

TEST_CASE("Frechet distance of a set with itself vanishes") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> rows(40, std::vector<double>(16));
  for (auto& row : rows)
    for (auto& v : row) v = n(rng);
  const auto r = frechet_distance(rows, rows);
  CHECK(std::abs(r.value) < 1e-6);
  // Rank-deficient covariance (fewer rows than features) still works.
  rows.resize(5);
  CHECK(std::abs(frechet_distance(rows, rows).value) < 1e-6);
  auto shifted = rows;
  for (auto& row : shifted) row[0] += 2.0;
  CHECK(frechet_distance(rows, shifted).value == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("embedding Frechet distance") {
  EncoderConfig ec;
  ec.dim = 16;
  ec.depth = 1;
  ec.heads = 2;
  ec.mlp_ratio = 2;
  auto enc = make_encoder(ec, 2);
  std::vector<Field> fields;
  for (int i = 0; i < 6; ++i) fields.push_back(random_field(16, 16, 20 + i, 3.0));
  CHECK_THROWS(embedding_frechet_distance(enc, fields, fields, -9, 9));
  enc->freeze();
  const auto self = embedding_frechet_distance(enc, fields, fields, -9, 9);
  CHECK(std::abs(self.value) < 1e-6);
  std::vector<Field> other;
  for (int i = 0; i < 6; ++i) other.push_back(Field(16, 16, 5.0));
  CHECK(embedding_frechet_distance(enc, fields, other, -9, 9).value > 1e-3);
  const auto pooled = pooled_embeddings(enc, fields, -9, 9);
  CHECK(pooled.size() == 6);
  CHECK(pooled[0].size() == 16);
}
