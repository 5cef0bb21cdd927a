#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace efdiff {

// Timesteps are 1-indexed; t = 0 is the clean state.

/// Variance-preserving schedule: linear beta_t with cumulative
/// alpha_bar_t = prod_{u<=t} (1 - beta_u).
struct VPSchedule {
  int steps = 0;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha_bar;  // alpha_bar[t-1]

  double beta_at(int t) const;
  double alpha_bar_at(int t) const;  // alpha_bar_at(0) == 1
  std::string digest() const;
  nlohmann::json to_json() const;
};

/// Residual-shift schedule: sqrt(eta_t) geometric between the endpoints,
/// noise scale kappa.
struct ShiftSchedule {
  int steps = 0;
  double kappa = 1.0;
  std::vector<double> eta;  // eta[t-1]

  double eta_at(int t) const;  // eta_at(0) == 0
  std::string digest() const;
  nlohmann::json to_json() const;
};

inline constexpr double kDefaultSqrtEtaMin = 0.04;
inline constexpr double kDefaultSqrtEtaMax = 0.999;

VPSchedule build_vp_schedule(int steps, double beta_min = 1e-6, double beta_max = 1e-2);
ShiftSchedule build_shift_schedule(int steps, double kappa = 1.0, double sqrt_eta_min = kDefaultSqrtEtaMin,
                                   double sqrt_eta_max = kDefaultSqrtEtaMax);

VPSchedule vp_schedule_from_json(const nlohmann::json& j);
ShiftSchedule shift_schedule_from_json(const nlohmann::json& j);

/// Evenly spaced increasing timesteps in [1, T] ending at T:
/// t_i = floor(i * T / n) for i = 1..n.
std::vector<int> ddim_subsequence(int steps, int n_steps);

}  // namespace efdiff
