#include "efdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <Eigen/Dense>

namespace efdiff {

namespace {

void require_same(const Field& a, const Field& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(size);
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Weighted sums over every valid size x size window, separable.
Field valid_filter(const Field& f, const std::vector<double>& w) {
  const int k = static_cast<int>(w.size());
  const int oh = f.height() - k + 1, ow = f.width() - k + 1;
  Field rows(f.height(), ow);
  for (int r = 0; r < f.height(); ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += w[i] * f(r, c + i);
      rows(r, c) = s;
    }
  Field out(oh, ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += w[i] * rows(r + i, c);
      out(r, c) = s;
    }
  return out;
}

Field product(const Field& a, const Field& b) {
  Field out(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  return out;
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw std::invalid_argument("frechet: ragged feature rows");
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double frechet(const Eigen::VectorXd& ma, const Eigen::MatrixXd& ca, const Eigen::VectorXd& mb,
               const Eigen::MatrixXd& cb) {
  // Tr((A B)^{1/2}) = Tr((A^{1/2} B A^{1/2})^{1/2}); the inner matrix is symmetric PSD.
  const Eigen::MatrixXd ra = psd_sqrt(ca);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ra * cb * ra);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
}

}  // namespace

double rmse(const Field& pred, const Field& target) {
  require_same(pred, target, "rmse");
  if (pred.empty()) throw std::invalid_argument("rmse: empty field");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.values()[i] - target.values()[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

double rmse(const Field& pred, const Field& target, const std::vector<bool>& mask) {
  require_same(pred, target, "rmse");
  if (mask.size() != pred.size()) throw std::invalid_argument("rmse: mask size mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const double d = pred.values()[i] - target.values()[i];
    s += d * d;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("rmse: empty mask");
  return std::sqrt(s / static_cast<double>(n));
}

double ssim(const Field& pred, const Field& target, double dynamic_range, const SsimOptions& options) {
  require_same(pred, target, "ssim");
  if (!(dynamic_range > 0)) throw std::invalid_argument("ssim: dynamic range must be > 0");
  if (pred.height() < options.window || pred.width() < options.window)
    throw std::invalid_argument("ssim: field smaller than the window");
  const auto w = gaussian_window(options.window, options.sigma);
  const double c1 = std::pow(options.k1 * dynamic_range, 2), c2 = std::pow(options.k2 * dynamic_range, 2);
  const Field mx = valid_filter(pred, w), my = valid_filter(target, w);
  const Field sxx = valid_filter(product(pred, pred), w);
  const Field syy = valid_filter(product(target, target), w);
  const Field sxy = valid_filter(product(pred, target), w);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double ux = mx.values()[i], uy = my.values()[i];
    const double vx = sxx.values()[i] - ux * ux, vy = syy.values()[i] - uy * uy, cxy = sxy.values()[i] - ux * uy;
    total += ((2 * ux * uy + c1) * (2 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

Field per_pixel_rmse_map(std::span<const Field> predictions, std::span<const Field> targets) {
  if (predictions.empty()) throw std::invalid_argument("per_pixel_rmse_map: empty set");
  if (predictions.size() != targets.size()) throw std::invalid_argument("per_pixel_rmse_map: set size mismatch");
  Field acc(predictions.front().height(), predictions.front().width());
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    require_same(predictions[k], acc, "per_pixel_rmse_map");
    require_same(targets[k], acc, "per_pixel_rmse_map");
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const double d = predictions[k].values()[i] - targets[k].values()[i];
      acc.values()[i] += d * d;
    }
  }
  for (auto& v : acc.values()) v = std::sqrt(v / static_cast<double>(predictions.size()));
  return acc;
}

std::optional<double> checkerboard_score(const Field& map, int scale) {
  if (scale < 3) throw std::invalid_argument("checkerboard_score: scale must leave interior pixels");
  double edge = 0.0, inner = 0.0;
  long ne = 0, ni = 0;
  for (int r = 0; r < map.height(); ++r)
    for (int c = 0; c < map.width(); ++c) {
      const int rr = r % scale, cc = c % scale;
      const bool boundary = rr == 0 || rr == scale - 1 || cc == 0 || cc == scale - 1;
      if (boundary) {
        edge += map(r, c);
        ++ne;
      } else {
        inner += map(r, c);
        ++ni;
      }
    }
  if (ni == 0 || ne == 0 || inner == 0.0) return std::nullopt;
  return (edge / ne) / (inner / ni);
}

double scene_complexity(const Stack& s) {
  if (s.height() < 2 || s.width() < 2) throw std::invalid_argument("scene_complexity: needs at least 2x2 pixels");
  double total = 0.0;
  for (int b = 0; b < s.bands(); ++b)
    for (int r = 0; r + 1 < s.height(); ++r)
      for (int c = 0; c + 1 < s.width(); ++c) {
        const double gx = s(b, r, c + 1) - s(b, r, c);
        const double gy = s(b, r + 1, c) - s(b, r, c);
        total += std::sqrt(gx * gx + gy * gy);
      }
  return total / (static_cast<double>(s.bands()) * (s.height() - 1) * (s.width() - 1));
}

std::optional<double> pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson_correlation: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // Relative floor so that series equal up to rounding count as constant.
  const double floor_x = 1e-24 * std::max(1.0, mx * mx) * n, floor_y = 1e-24 * std::max(1.0, my * my) * n;
  if (sxx <= floor_x || syy <= floor_y) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::json DeltaAnalysis::to_json() const {
  nlohmann::json jb = nlohmann::json::array();
  for (const auto& b : bins)
    jb.push_back({{"lo", b.lo},
                  {"hi", b.hi},
                  {"count", b.count},
                  {"mean", b.mean},
                  {"standard_error", b.standard_error},
                  {"less_stable", b.less_stable}});
  return {{"ids", ids},
          {"delta", delta},
          {"complexity", complexity},
          {"bins", jb},
          {"correlation", correlation ? nlohmann::json(*correlation) : nlohmann::json(nullptr)}};
}

DeltaAnalysis DeltaAnalysis::from_json(const nlohmann::json& j) {
  DeltaAnalysis a;
  a.ids = j.at("ids").get<std::vector<std::uint64_t>>();
  a.delta = j.at("delta").get<std::vector<double>>();
  a.complexity = j.at("complexity").get<std::vector<double>>();
  for (const auto& b : j.at("bins"))
    a.bins.push_back({b.at("lo"), b.at("hi"), b.at("count"), b.at("mean"), b.at("standard_error"), b.at("less_stable")});
  if (!j.at("correlation").is_null()) a.correlation = j.at("correlation").get<double>();
  return a;
}

DeltaAnalysis delta_rmse_analysis(std::span<const PatchValue> rmse_a, std::span<const PatchValue> rmse_b,
                                  std::span<const PatchValue> complexity, int bins, int min_count) {
  if (bins < 1) throw std::invalid_argument("delta_rmse_analysis: bins must be >= 1");
  if (rmse_a.empty()) throw std::invalid_argument("delta_rmse_analysis: no patches");
  auto index = [](std::span<const PatchValue> xs) {
    std::map<std::uint64_t, double> m;
    for (const auto& x : xs)
      if (!m.emplace(x.id, x.value).second) throw std::invalid_argument("delta_rmse_analysis: duplicate patch id");
    return m;
  };
  const auto ma = index(rmse_a), mb = index(rmse_b), mc = index(complexity);
  if (ma.size() != mb.size() || ma.size() != mc.size())
    throw std::invalid_argument("delta_rmse_analysis: misaligned patch ids");
  DeltaAnalysis out;
  for (const auto& [id, a] : ma) {
    auto ib = mb.find(id);
    auto ic = mc.find(id);
    if (ib == mb.end() || ic == mc.end()) throw std::invalid_argument("delta_rmse_analysis: misaligned patch ids");
    out.ids.push_back(id);
    out.delta.push_back(a - ib->second);
    out.complexity.push_back(ic->second);
  }
  const auto [lo_it, hi_it] = std::minmax_element(out.complexity.begin(), out.complexity.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / bins;
  out.bins.resize(bins);
  std::vector<std::vector<double>> members(bins);
  for (std::size_t i = 0; i < out.delta.size(); ++i) {
    int k = width > 0 ? static_cast<int>((out.complexity[i] - lo) / width) : 0;
    k = std::clamp(k, 0, bins - 1);
    members[k].push_back(out.delta[i]);
  }
  for (int k = 0; k < bins; ++k) {
    auto& b = out.bins[k];
    b.lo = lo + k * width;
    b.hi = k == bins - 1 ? hi : lo + (k + 1) * width;
    b.count = static_cast<int>(members[k].size());
    b.less_stable = b.count < min_count;
    if (b.count == 0) continue;
    double m = 0;
    for (double v : members[k]) m += v;
    m /= b.count;
    b.mean = m;
    if (b.count > 1) {
      double ss = 0;
      for (double v : members[k]) ss += (v - m) * (v - m);
      b.standard_error = std::sqrt(ss / (b.count - 1)) / std::sqrt(static_cast<double>(b.count));
    }
  }
  out.correlation = pearson_correlation(out.delta, out.complexity);
  return out;
}

Field error_difference_map(const Field& pred_a, const Field& pred_b, const Field& target) {
  require_same(pred_a, target, "error_difference_map");
  require_same(pred_b, target, "error_difference_map");
  Field out(target.height(), target.width());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.values()[i] =
        std::abs(pred_a.values()[i] - target.values()[i]) - std::abs(pred_b.values()[i] - target.values()[i]);
  return out;
}

FrechetResult frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("frechet_distance: empty feature set");
  const Eigen::MatrixXd xa = to_matrix(a), xb = to_matrix(b);
  if (xa.cols() != xb.cols()) throw std::invalid_argument("frechet_distance: feature dimension mismatch");
  const Eigen::VectorXd ma = xa.colwise().mean().transpose(), mb = xb.colwise().mean().transpose();
  FrechetResult r;
  if (xa.rows() < 2 || xb.rows() < 2) {
    r.mean_only = true;
    r.value = (ma - mb).squaredNorm();
    return r;
  }
  const Eigen::MatrixXd da = xa.rowwise() - ma.transpose(), db = xb.rowwise() - mb.transpose();
  const Eigen::MatrixXd ca = da.transpose() * da / static_cast<double>(xa.rows() - 1);
  const Eigen::MatrixXd cb = db.transpose() * db / static_cast<double>(xb.rows() - 1);
  r.value = frechet(ma, ca, mb, cb);
  return r;
}

double frechet_distance_gaussians(const std::vector<double>& mean_a, const std::vector<std::vector<double>>& cov_a,
                                  const std::vector<double>& mean_b, const std::vector<std::vector<double>>& cov_b) {
  const auto d = static_cast<Eigen::Index>(mean_a.size());
  if (static_cast<Eigen::Index>(mean_b.size()) != d || static_cast<Eigen::Index>(cov_a.size()) != d ||
      static_cast<Eigen::Index>(cov_b.size()) != d)
    throw std::invalid_argument("frechet_distance_gaussians: dimension mismatch");
  const Eigen::VectorXd ma = Eigen::Map<const Eigen::VectorXd>(mean_a.data(), d);
  const Eigen::VectorXd mb = Eigen::Map<const Eigen::VectorXd>(mean_b.data(), d);
  return frechet(ma, to_matrix(cov_a), mb, to_matrix(cov_b));
}

std::vector<std::vector<double>> pooled_embeddings(ViTEncoder& encoder, std::span<const Field> fields, double lo,
                                                   double hi) {
  if (!(hi > lo)) throw std::invalid_argument("pooled_embeddings: degenerate range");
  if (!encoder->frozen()) throw std::invalid_argument("pooled_embeddings: encoder must be frozen");
  const int bands = encoder->config().bands;
  std::vector<std::vector<double>> out;
  torch::NoGradGuard no_grad;
  for (const auto& f : fields) {
    auto t = ((to_tensor(f) - lo) / (hi - lo)).clamp(0.0, 1.0);
    auto images = t.unsqueeze(0).unsqueeze(0).expand({1, bands, f.height(), f.width()}).contiguous();
    auto pooled = encoder->embed(images).tokens.mean(1).squeeze(0).to(torch::kFloat64).contiguous();
    out.emplace_back(pooled.data_ptr<double>(), pooled.data_ptr<double>() + pooled.numel());
  }
  return out;
}

FrechetResult embedding_frechet_distance(ViTEncoder& encoder, std::span<const Field> a, std::span<const Field> b,
                                         double lo, double hi) {
  return frechet_distance(pooled_embeddings(encoder, a, lo, hi), pooled_embeddings(encoder, b, lo, hi));
}

}  // namespace efdiff
