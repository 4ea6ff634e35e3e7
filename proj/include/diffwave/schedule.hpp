#pragma once

// Training variance schedules and user-defined fast-sampling schedules.
//
// Steps are 1-indexed in the accessors (t = 1..T) to match the usual
// diffusion notation; alpha_bar(0) is defined as 1, the zero-noise level.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffwave/error.hpp"

namespace diffwave {

class VarianceSchedule {
 public:
  VarianceSchedule() = default;

  /// Any betas in (0, 1). Derived constants are computed in double.
  explicit VarianceSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    require(!betas_.empty(), "schedule: T must be >= 1");
    for (double b : betas_)
      require(b > 0.0 && b < 1.0, "schedule: beta " + std::to_string(b) + " outside (0, 1)");
    derive();
  }

  /// Bypasses validation; test harnesses use it for degenerate schedules (e.g. all zeros).
  static VarianceSchedule unchecked(std::vector<double> betas) {
    VarianceSchedule s;
    s.betas_ = std::move(betas);
    s.derive();
    return s;
  }

  std::size_t T() const noexcept { return betas_.size(); }

  double beta(std::size_t t) const { return betas_.at(t - 1); }
  double alpha(std::size_t t) const { return alphas_.at(t - 1); }
  double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(t - 1); }
  double beta_tilde(std::size_t t) const { return beta_tildes_.at(t - 1); }

  const std::vector<double>& betas() const noexcept { return betas_; }
  const std::vector<double>& alphas() const noexcept { return alphas_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }
  const std::vector<double>& beta_tildes() const noexcept { return beta_tildes_; }

 private:
  void derive() {
    const std::size_t T = betas_.size();
    alphas_.resize(T);
    alpha_bars_.resize(T);
    beta_tildes_.resize(T);
    double prod = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
      alphas_[i] = 1.0 - betas_[i];
      const double prev = prod;
      prod *= alphas_[i];
      alpha_bars_[i] = prod;
      beta_tildes_[i] = i == 0 ? betas_[0] : (1.0 - prev) / (1.0 - prod) * betas_[i];
    }
  }

  std::vector<double> betas_, alphas_, alpha_bars_, beta_tildes_;
};

/// T betas linearly spaced from beta_start (t = 1) to beta_end (t = T), inclusive.
inline VarianceSchedule build_linear_schedule(std::size_t T, double beta_start, double beta_end) {
  require(T >= 1, "schedule: T must be >= 1");
  require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
          "schedule: need 0 < beta_start <= beta_end < 1, got [" + std::to_string(beta_start) + ", " +
              std::to_string(beta_end) + "]");
  std::vector<double> betas(T);
  for (std::size_t i = 0; i < T; ++i)
    betas[i] = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  if (T > 1) betas.back() = beta_end;
  return VarianceSchedule(std::move(betas));
}

struct AlignResult {
  double step = 0.0;
  /// Empty when the noise level was inside the training range.
  std::string warning;
};

/// Fractional training step whose noise level sqrt(alpha_bar) matches sqrt(gamma_bar),
/// interpolating linearly in sqrt(alpha_bar) between consecutive integer steps.
inline AlignResult align_diffusion_step(double gamma_bar, const VarianceSchedule& sched) {
  require(gamma_bar > 0.0 && gamma_bar <= 1.0, "align: gamma_bar must lie in (0, 1]");
  const std::size_t T = sched.T();
  const double g = std::sqrt(gamma_bar);
  AlignResult r;
  if (g < std::sqrt(sched.alpha_bar(T))) {
    r.step = static_cast<double>(T);
    r.warning = "noise level sqrt(gamma_bar)=" + std::to_string(g) +
                " is below the deepest training level; aligned to T=" + std::to_string(T);
    return r;
  }
  if (g > std::sqrt(sched.alpha_bar(1)))
    r.warning = "noise level sqrt(gamma_bar)=" + std::to_string(g) +
                " is above sqrt(alpha_bar_1); interpolated against alpha_bar_0 = 1";
  for (std::size_t t = 0; t < T; ++t) {
    const double hi = std::sqrt(sched.alpha_bar(t));
    const double lo = std::sqrt(sched.alpha_bar(t + 1));
    if (g <= hi && g >= lo) {
      r.step = static_cast<double>(t) + (hi - g) / (hi - lo);
      return r;
    }
  }
  r.step = static_cast<double>(T);
  return r;
}

class FastSchedule {
 public:
  FastSchedule() = default;

  std::size_t T_infer() const noexcept { return etas_.size(); }

  double eta(std::size_t s) const { return etas_.at(s - 1); }
  double gamma(std::size_t s) const { return gammas_.at(s - 1); }
  double gamma_bar(std::size_t s) const { return s == 0 ? 1.0 : gamma_bars_.at(s - 1); }
  double eta_tilde(std::size_t s) const { return eta_tildes_.at(s - 1); }
  double aligned_step(std::size_t s) const { return aligned_steps_.at(s - 1); }

  const std::vector<double>& etas() const noexcept { return etas_; }
  const std::vector<double>& gammas() const noexcept { return gammas_; }
  const std::vector<double>& gamma_bars() const noexcept { return gamma_bars_; }
  const std::vector<double>& eta_tildes() const noexcept { return eta_tildes_; }
  const std::vector<double>& aligned_steps() const noexcept { return aligned_steps_; }
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }
  std::size_t training_T() const noexcept { return training_T_; }

 private:
  friend FastSchedule build_fast_schedule(const std::vector<double>& etas, const VarianceSchedule& training);

  std::vector<double> etas_, gammas_, gamma_bars_, eta_tildes_, aligned_steps_;
  std::vector<std::string> warnings_;
  std::size_t training_T_ = 0;
};

/// Constants for a user-defined inference schedule plus the aligned training steps.
inline FastSchedule build_fast_schedule(const std::vector<double>& etas, const VarianceSchedule& training) {
  require(!etas.empty(), "fast schedule: etas must be nonempty");
  for (double e : etas) require(e > 0.0 && e < 1.0, "fast schedule: eta " + std::to_string(e) + " outside (0, 1)");
  // Same arithmetic as the training schedule so that equal inputs give equal bits.
  const VarianceSchedule as_sched(etas);
  FastSchedule f;
  f.etas_ = as_sched.betas();
  f.gammas_ = as_sched.alphas();
  f.gamma_bars_ = as_sched.alpha_bars();
  f.eta_tildes_ = as_sched.beta_tildes();
  f.training_T_ = training.T();
  for (std::size_t s = 0; s < etas.size(); ++s) {
    auto r = align_diffusion_step(f.gamma_bars_[s], training);
    f.aligned_steps_.push_back(r.step);
    if (!r.warning.empty()) f.warnings_.push_back("step " + std::to_string(s + 1) + ": " + r.warning);
  }
  for (std::size_t s = 1; s < f.aligned_steps_.size(); ++s)
    if (!(f.aligned_steps_[s] > f.aligned_steps_[s - 1]))
      f.warnings_.push_back("aligned steps not strictly increasing at step " + std::to_string(s + 1));
  return f;
}

}  // namespace diffwave
