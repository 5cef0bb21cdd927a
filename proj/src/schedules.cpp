#include "efdiff/schedules.hpp"

#include <cmath>
#include <span>
#include <stdexcept>

#include "efdiff/digest.hpp"

namespace efdiff {

double VPSchedule::beta_at(int t) const {
  if (t < 1 || t > steps) throw std::out_of_range("VPSchedule::beta_at: t outside [1, T]");
  return beta[t - 1];
}

double VPSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > steps) throw std::out_of_range("VPSchedule::alpha_bar_at: t outside [0, T]");
  return alpha_bar[t - 1];
}

std::string VPSchedule::digest() const {
  Digest d;
  d.update("vp").update_pod(steps);
  d.update_values(std::span<const double>(beta));
  return d.hex();
}

nlohmann::json VPSchedule::to_json() const {
  return {{"kind", "vp"}, {"steps", steps}, {"beta", beta}, {"alpha_bar", alpha_bar}, {"digest", digest()}};
}

double ShiftSchedule::eta_at(int t) const {
  if (t == 0) return 0.0;
  if (t < 0 || t > steps) throw std::out_of_range("ShiftSchedule::eta_at: t outside [0, T]");
  return eta[t - 1];
}

std::string ShiftSchedule::digest() const {
  Digest d;
  d.update("shift").update_pod(steps).update_pod(kappa);
  d.update_values(std::span<const double>(eta));
  return d.hex();
}

nlohmann::json ShiftSchedule::to_json() const {
  return {{"kind", "shift"}, {"steps", steps}, {"kappa", kappa}, {"eta", eta}, {"digest", digest()}};
}

VPSchedule build_vp_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw std::invalid_argument("build_vp_schedule: T must be >= 1");
  if (!(beta_min > 0.0) || !(beta_max < 1.0) || beta_min > beta_max)
    throw std::invalid_argument("build_vp_schedule: need 0 < beta_min <= beta_max < 1");
  VPSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    s.beta[i] = beta_min + (beta_max - beta_min) * frac;
    running *= 1.0 - s.beta[i];
    s.alpha_bar[i] = running;
  }
  return s;
}

ShiftSchedule build_shift_schedule(int steps, double kappa, double sqrt_eta_min, double sqrt_eta_max) {
  if (steps < 1) throw std::invalid_argument("build_shift_schedule: T must be >= 1");
  if (!(kappa > 0.0)) throw std::invalid_argument("build_shift_schedule: kappa must be > 0");
  if (!(sqrt_eta_min > 0.0) || !(sqrt_eta_max <= 1.0))
    throw std::invalid_argument("build_shift_schedule: need 0 < sqrt_eta_min and sqrt_eta_max <= 1");
  if (steps > 1 ? !(sqrt_eta_min < sqrt_eta_max) : !(sqrt_eta_min <= sqrt_eta_max))
    throw std::invalid_argument("build_shift_schedule: endpoints must be increasing");
  ShiftSchedule s;
  s.steps = steps;
  s.kappa = kappa;
  s.eta.resize(steps);
  if (steps == 1) {
    s.eta[0] = sqrt_eta_max * sqrt_eta_max;
    return s;
  }
  const double log_ratio = std::log(sqrt_eta_max / sqrt_eta_min);
  for (int i = 0; i < steps; ++i) {
    const double root = i == steps - 1
                            ? sqrt_eta_max
                            : sqrt_eta_min * std::exp(log_ratio * static_cast<double>(i) / (steps - 1));
    s.eta[i] = root * root;
  }
  return s;
}

VPSchedule vp_schedule_from_json(const nlohmann::json& j) {
  if (j.at("kind") != "vp") throw std::invalid_argument("not a vp schedule");
  VPSchedule s;
  s.steps = j.at("steps");
  s.beta = j.at("beta").get<std::vector<double>>();
  s.alpha_bar = j.at("alpha_bar").get<std::vector<double>>();
  if (static_cast<int>(s.beta.size()) != s.steps || s.alpha_bar.size() != s.beta.size())
    throw std::invalid_argument("vp schedule: table length mismatch");
  return s;
}

ShiftSchedule shift_schedule_from_json(const nlohmann::json& j) {
  if (j.at("kind") != "shift") throw std::invalid_argument("not a shift schedule");
  ShiftSchedule s;
  s.steps = j.at("steps");
  s.kappa = j.at("kappa");
  s.eta = j.at("eta").get<std::vector<double>>();
  if (static_cast<int>(s.eta.size()) != s.steps) throw std::invalid_argument("shift schedule: table length mismatch");
  return s;
}

std::vector<int> ddim_subsequence(int steps, int n_steps) {
  if (steps < 1) throw std::invalid_argument("ddim_subsequence: T must be >= 1");
  if (n_steps < 1 || n_steps > steps) throw std::invalid_argument("ddim_subsequence: n_steps outside [1, T]");
  std::vector<int> out(n_steps);
  for (int i = 1; i <= n_steps; ++i)
    out[i - 1] = static_cast<int>((static_cast<long long>(i) * steps) / n_steps);
  return out;
}

}  // namespace efdiff
