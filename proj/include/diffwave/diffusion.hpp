#pragma once

// Closed-form diffusion mathematics: the forward marginal q(x_t | x_0), the
// true posterior q(x_{t-1} | x_t, x_0), the epsilon-parameterized reverse
// step, the training loss, and two independent routes to the negative ELBO.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "diffwave/error.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/schedule.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

namespace detail {
inline void check_step(std::size_t t, const VarianceSchedule& sched, std::size_t lo = 1) {
  if (t < lo || t > sched.T())
    fail(ErrorKind::Config, "diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(sched.T()) + "]");
}
template <class A, class B>
void check_len(const A& a, const B& b, const char* what) {
  if (a.size() != b.size())
    fail(ErrorKind::Config, std::string(what) + ": length " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
}
}  // namespace detail

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
template <class Real>
std::vector<Real> q_sample(std::span<const Real> x0, std::size_t t, std::span<const Real> eps,
                           const VarianceSchedule& sched) {
  detail::check_step(t, sched);
  detail::check_len(x0, eps, "q_sample");
  const double a = std::sqrt(sched.alpha_bar(t));
  const double s = std::sqrt(1.0 - sched.alpha_bar(t));
  std::vector<Real> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i)
    out[i] = static_cast<Real>(a * static_cast<double>(x0[i]) + s * static_cast<double>(eps[i]));
  return out;
}

struct Posterior {
  std::vector<double> mean;
  double var = 0.0;
};

/// Mean and variance of q(x_{t-1} | x_t, x_0). t = 1 uses alpha_bar_0 = 1.
inline Posterior q_posterior(std::span<const double> x0, std::span<const double> xt, std::size_t t,
                             const VarianceSchedule& sched) {
  detail::check_step(t, sched);
  detail::check_len(x0, xt, "q_posterior");
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * sched.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  Posterior p;
  p.mean.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) p.mean[i] = c0 * x0[i] + ct * xt[i];
  p.var = sched.beta_tilde(t);
  return p;
}

template <class Real>
struct ReverseStepParams {
  std::vector<Real> mu;
  double sigma = 0.0;
};

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t), sigma = sqrt(beta_tilde_t).
template <class Real>
ReverseStepParams<Real> reverse_step_params(std::span<const Real> xt, std::size_t t, std::span<const Real> eps_pred,
                                            const VarianceSchedule& sched) {
  detail::check_step(t, sched);
  detail::check_len(xt, eps_pred, "reverse_step_params");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  ReverseStepParams<Real> r;
  r.mu.resize(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i)
    r.mu[i] = static_cast<Real>(inv_sqrt_alpha * (static_cast<double>(xt[i]) - coef * static_cast<double>(eps_pred[i])));
  r.sigma = std::sqrt(sched.beta_tilde(t));
  return r;
}

/// alpha_t (1 - alpha_bar_{t-1}) + beta_t - (1 - alpha_bar_t), relative to 1 - alpha_bar_t.
inline double variance_identity_residual(const VarianceSchedule& sched, std::size_t t) {
  const double lhs = sched.alpha(t) * (1.0 - sched.alpha_bar(t - 1)) + sched.beta(t);
  const double rhs = 1.0 - sched.alpha_bar(t);
  return std::abs(lhs - rhs) / std::abs(rhs);
}

/// Squared L2 norm over all non-batch axes, averaged over the batch (axis 0).
template <class Real>
double unweighted_loss(const Tensor<Real>& eps, const Tensor<Real>& eps_pred) {
  eps.check_same(eps_pred, "unweighted_loss");
  require(eps.rank() >= 1 && eps.dim(0) > 0, "unweighted_loss: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double d = static_cast<double>(eps[i]) - static_cast<double>(eps_pred[i]);
    s += d * d;
  }
  return s / static_cast<double>(eps.dim(0));
}

/// x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps_t for t = 1..T; element t-1 holds x_t.
inline std::vector<std::vector<double>> simulate_diffusion_chain(std::span<const double> x0,
                                                                 const VarianceSchedule& sched, Rng& rng) {
  std::vector<std::vector<double>> traj;
  traj.reserve(sched.T());
  std::vector<double> x(x0.begin(), x0.end()), eps(x0.size());
  for (std::size_t t = 1; t <= sched.T(); ++t) {
    rng.fill_normal(std::span<double>(eps));
    const double a = std::sqrt(sched.alpha(t)), b = std::sqrt(sched.beta(t));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * x[i] + b * eps[i];
    traj.push_back(x);
  }
  return traj;
}

/// Single-example noise predictor eps_theta(x_t, t).
using EpsPredictor = std::function<std::vector<double>(std::span<const double> xt, std::size_t t)>;

/// Source of x_0 draws. When `mean_sq_norm` is set it is used as E||x_0||^2 exactly.
struct DataSampler {
  std::function<std::vector<double>(Rng&)> draw;
  std::optional<double> mean_sq_norm;

  /// Uniform over a finite set of examples.
  static DataSampler finite(std::vector<std::vector<double>> examples) {
    require(!examples.empty(), "data sampler: empty dataset");
    double m = 0.0;
    for (const auto& x : examples)
      for (double v : x) m += v * v;
    m /= static_cast<double>(examples.size());
    auto shared = std::make_shared<std::vector<std::vector<double>>>(std::move(examples));
    DataSampler s;
    s.draw = [shared](Rng& rng) {
      return (*shared)[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(shared->size()) - 1))];
    };
    s.mean_sq_norm = m;
    return s;
  }
};

struct ElboTerms {
  double const_c = 0.0;
  std::vector<double> kappas;                 // kappa_t, t = 1..T at index t-1
  std::vector<double> per_step_expectations;  // E||eps - eps_theta(x_t, t)||^2
  std::vector<double> per_step_stderr;
  double total_neg_elbo = 0.0;
  double total_stderr = 0.0;
};

inline std::vector<double> elbo_kappas(const VarianceSchedule& sched) {
  std::vector<double> k(sched.T());
  k[0] = 1.0 / (2.0 * sched.alpha(1));
  for (std::size_t t = 2; t <= sched.T(); ++t)
    k[t - 1] = sched.beta(t) / (2.0 * sched.alpha(t) * (1.0 - sched.alpha_bar(t - 1)));
  return k;
}

/// Constant of the negative ELBO for data dimension d:
/// prior KL of q(x_T | x_0) against N(0, I) plus the Gaussian normalizer of p(x_0 | x_1).
inline double elbo_constant(const VarianceSchedule& sched, std::size_t d, double mean_sq_norm) {
  const double abT = sched.alpha_bar(sched.T());
  const double dd = static_cast<double>(d);
  const double prior_kl = 0.5 * (abT * mean_sq_norm - dd * abT - dd * std::log(1.0 - abT));
  return prior_kl + 0.5 * dd * std::log(2.0 * std::numbers::pi * sched.beta(1));
}

/// -ELBO = c + sum_t kappa_t E||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)||^2,
/// with each expectation estimated from n_outer draws of (x0, eps).
inline ElboTerms elbo_closed_form(const EpsPredictor& model, const DataSampler& data, const VarianceSchedule& sched,
                                  std::size_t n_outer, Rng& rng) {
  require(n_outer >= 1, "elbo_closed_form: n_outer must be >= 1");
  require(static_cast<bool>(data.draw), "elbo_closed_form: empty dataset");
  const std::size_t T = sched.T();
  ElboTerms out;
  out.kappas = elbo_kappas(sched);
  out.per_step_expectations.assign(T, 0.0);
  out.per_step_stderr.assign(T, 0.0);

  std::size_t d = 0;
  double sq_sum = 0.0, sq_sum2 = 0.0;
  std::vector<double> eps;
  for (std::size_t t = 1; t <= T; ++t) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t n = 0; n < n_outer; ++n) {
      const auto x0 = data.draw(rng);
      require(!x0.empty(), "elbo_closed_form: empty example");
      if (d == 0) d = x0.size();
      require(x0.size() == d, "elbo_closed_form: examples differ in length");
      double nrm = 0.0;
      for (double v : x0) nrm += v * v;
      sq_sum += nrm;
      sq_sum2 += nrm * nrm;
      eps.resize(d);
      rng.fill_normal(std::span<double>(eps));
      const auto xt = q_sample<double>(x0, t, eps, sched);
      const auto pred = model(xt, t);
      detail::check_len(pred, eps, "elbo_closed_form: predictor output");
      double r = 0.0;
      for (std::size_t i = 0; i < d; ++i) r += (eps[i] - pred[i]) * (eps[i] - pred[i]);
      s += r;
      s2 += r * r;
    }
    const double nn = static_cast<double>(n_outer);
    const double mean = s / nn;
    out.per_step_expectations[t - 1] = mean;
    out.per_step_stderr[t - 1] = n_outer > 1 ? std::sqrt(std::max(0.0, (s2 - nn * mean * mean) / (nn - 1.0)) / nn) : 0.0;
  }

  const double total_draws = static_cast<double>(n_outer * T);
  double msq = sq_sum / total_draws, msq_se = 0.0;
  if (data.mean_sq_norm) {
    msq = *data.mean_sq_norm;
  } else if (total_draws > 1) {
    const double var = std::max(0.0, (sq_sum2 - total_draws * msq * msq) / (total_draws - 1.0));
    msq_se = std::sqrt(var / total_draws);
  }
  out.const_c = elbo_constant(sched, d, msq);
  out.total_neg_elbo = out.const_c;
  const double prior_w = 0.5 * sched.alpha_bar(T);
  double var_total = prior_w * prior_w * msq_se * msq_se;
  for (std::size_t t = 0; t < T; ++t) {
    out.total_neg_elbo += out.kappas[t] * out.per_step_expectations[t];
    var_total += out.kappas[t] * out.kappas[t] * out.per_step_stderr[t] * out.per_step_stderr[t];
  }
  out.total_stderr = std::sqrt(var_total);
  return out;
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

namespace detail {
inline double log_normal_iso(std::span<const double> x, std::span<const double> mean, double var) {
  double q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) q += (x[i] - mean[i]) * (x[i] - mean[i]);
  return -0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi * var) - 0.5 * q / var;
}
}  // namespace detail

/// Direct estimator of -ELBO: average over full forward trajectories of
/// -[log p_latent(x_T) + sum_t log p_theta(x_{t-1} | x_t) - sum_t log q(x_t | x_{t-1})].
inline MonteCarloEstimate elbo_monte_carlo(const EpsPredictor& model, const DataSampler& data,
                                           const VarianceSchedule& sched, std::size_t n, Rng& rng) {
  require(n >= 100, "elbo_monte_carlo: n must be >= 100");
  require(static_cast<bool>(data.draw), "elbo_monte_carlo: empty dataset");
  const std::size_t T = sched.T();
  for (std::size_t t = 1; t <= T; ++t)
    if (!(sched.beta_tilde(t) > 0.0))
      fail(ErrorKind::Numeric, "elbo_monte_carlo: degenerate schedule, beta_tilde_" + std::to_string(t) + " = 0");
  double s = 0.0, s2 = 0.0;
  std::vector<double> zeros;
  for (std::size_t k = 0; k < n; ++k) {
    const auto x0 = data.draw(rng);
    const auto traj = simulate_diffusion_chain(x0, sched, rng);
    zeros.assign(x0.size(), 0.0);
    double log_ratio = detail::log_normal_iso(traj[T - 1], zeros, 1.0);
    for (std::size_t t = 1; t <= T; ++t) {
      const auto& xt = traj[t - 1];
      const std::vector<double>& prev = t == 1 ? x0 : traj[t - 2];
      const auto pred = model(xt, t);
      const auto step = reverse_step_params<double>(xt, t, pred, sched);
      log_ratio += detail::log_normal_iso(prev, step.mu, step.sigma * step.sigma);
      std::vector<double> fwd_mean(prev.size());
      const double a = std::sqrt(sched.alpha(t));
      for (std::size_t i = 0; i < prev.size(); ++i) fwd_mean[i] = a * prev[i];
      log_ratio -= detail::log_normal_iso(xt, fwd_mean, sched.beta(t));
    }
    s += -log_ratio;
    s2 += log_ratio * log_ratio;
  }
  const double nn = static_cast<double>(n);
  MonteCarloEstimate r;
  r.estimate = s / nn;
  r.std_error = std::sqrt(std::max(0.0, (s2 - nn * r.estimate * r.estimate) / (nn - 1.0)) / nn);
  return r;
}

}  // namespace diffwave
