#pragma once

// Reverse-process samplers: the full T-step chain, the fast chain over a
// user-defined schedule evaluated at aligned fractional steps, zero-shot
// denoising from an intermediate step, and latent-space interpolation.

#include <cmath>
#include <functional>
#include <vector>

#include "diffwave/error.hpp"
#include "diffwave/model.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/schedule.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

/// eps_theta over a batch [B,1,L] at one (possibly fractional) step.
template <class Real>
using BatchPredictor = std::function<Tensor<Real>(const Tensor<Real>& xt, double t)>;

template <class Real>
BatchPredictor<Real> model_predictor(DiffWave<Real>& model, Conditioner<Real> cond = {}) {
  return [&model, cond = std::move(cond)](const Tensor<Real>& xt, double t) { return model.predict(xt, t, cond); };
}

struct SamplerOptions {
  /// Draw noise on the last reverse step too (the printed algorithm does; off returns the mean).
  bool noise_at_final_step = false;
  /// Suppress the per-step noise draws (x_T is still drawn).
  bool deterministic = false;
};

/// One reverse transition x <- (x - c_eps * eps) * c_x + sigma * z.
struct ReverseStep {
  double t_eval;  // step fed to eps_theta
  double c_x;     // 1 / sqrt(alpha)
  double c_eps;   // beta / sqrt(1 - alpha_bar)
  double sigma;   // sqrt(beta_tilde)
};

/// Steps for t = t_start..1 of a training schedule.
inline std::vector<ReverseStep> training_steps(const VarianceSchedule& s, std::size_t t_start) {
  require(t_start >= 1 && t_start <= s.T(), "reverse chain: start step " + std::to_string(t_start) +
                                                " outside [1, " + std::to_string(s.T()) + "]");
  std::vector<ReverseStep> steps;
  for (std::size_t t = t_start; t >= 1; --t)
    steps.push_back({static_cast<double>(t), 1.0 / std::sqrt(s.alpha(t)), s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t)),
                     std::sqrt(s.beta_tilde(t))});
  return steps;
}

/// Steps for s = T_infer..1 of a fast schedule, evaluated at the aligned training steps.
inline std::vector<ReverseStep> fast_steps(const FastSchedule& f) {
  std::vector<ReverseStep> steps;
  for (std::size_t s = f.T_infer(); s >= 1; --s)
    steps.push_back({f.aligned_step(s), 1.0 / std::sqrt(f.gamma(s)), f.eta(s) / std::sqrt(1.0 - f.gamma_bar(s)),
                     std::sqrt(f.eta_tilde(s))});
  return steps;
}

template <class Real>
void check_finite(const Tensor<Real>& x, const char* where, double t) {
  for (Real v : x.vec())
    if (!std::isfinite(static_cast<double>(v)))
      fail(ErrorKind::Numeric, std::string(where) + ": non-finite value at step " + std::to_string(t));
}

/// Runs the given reverse transitions from x in place.
template <class Real>
Tensor<Real> run_reverse_chain(const BatchPredictor<Real>& eps_theta, Tensor<Real> x,
                               const std::vector<ReverseStep>& steps, Rng& rng, const SamplerOptions& opt = {}) {
  Tensor<Real> z(x.shape());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& st = steps[i];
    const Tensor<Real> eps = eps_theta(x, st.t_eval);
    x.check_same(eps, "reverse step: prediction shape");
    const bool last = i + 1 == steps.size();
    const bool noisy = !opt.deterministic && (!last || opt.noise_at_final_step);
    if (noisy) rng.fill_normal(z.span());
    for (std::size_t j = 0; j < x.size(); ++j) {
      double v = (static_cast<double>(x[j]) - st.c_eps * static_cast<double>(eps[j])) * st.c_x;
      if (noisy) v += st.sigma * static_cast<double>(z[j]);
      x[j] = static_cast<Real>(v);
    }
    check_finite(x, "sampler", st.t_eval);
  }
  return x;
}

template <class Real>
Tensor<Real> draw_latent(Shape shape, Rng& rng) {
  Tensor<Real> x(std::move(shape));
  rng.fill_normal(x.span());
  return x;
}

/// Full reverse process: x_T ~ N(0, I), then t = T..1. Returns [B, 1, L].
template <class Real>
Tensor<Real> sample(const BatchPredictor<Real>& eps_theta, const VarianceSchedule& sched, std::size_t batch,
                    std::size_t L, Rng& rng, const SamplerOptions& opt = {}) {
  require(batch >= 1 && L >= 1, "sample: batch and length must be positive");
  auto x = draw_latent<Real>({batch, 1, L}, rng);
  return run_reverse_chain(eps_theta, std::move(x), training_steps(sched, sched.T()), rng, opt);
}

/// Fast reverse process over T_infer user steps.
template <class Real>
Tensor<Real> fast_sample(const BatchPredictor<Real>& eps_theta, const FastSchedule& fast, std::size_t batch,
                         std::size_t L, Rng& rng, const SamplerOptions& opt = {}) {
  require(batch >= 1 && L >= 1, "fast_sample: batch and length must be positive");
  require(fast.T_infer() >= 1, "fast_sample: empty fast schedule");
  auto x = draw_latent<Real>({batch, 1, L}, rng);
  return run_reverse_chain(eps_theta, std::move(x), fast_steps(fast), rng, opt);
}

/// Treats `noisy` as x_{t_start} and reverses it to x_0.
template <class Real>
Tensor<Real> denoise(const BatchPredictor<Real>& eps_theta, const VarianceSchedule& sched, Tensor<Real> noisy,
                     std::size_t t_start, Rng& rng, const SamplerOptions& opt = {}) {
  require(noisy.rank() == 3 && noisy.dim(1) == 1, "denoise: expected [B,1,L] input");
  return run_reverse_chain(eps_theta, std::move(noisy), training_steps(sched, t_start), rng, opt);
}

/// Forward-noises x0 to step t with fresh noise from rng.
template <class Real>
Tensor<Real> diffuse_to(const Tensor<Real>& x0, std::size_t t, const VarianceSchedule& sched, Rng& rng) {
  require(t >= 1 && t <= sched.T(), "diffuse: step out of range");
  Tensor<Real> eps(x0.shape());
  rng.fill_normal(eps.span());
  const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
  Tensor<Real> xt(x0.shape());
  for (std::size_t i = 0; i < xt.size(); ++i)
    xt[i] = static_cast<Real>(a * static_cast<double>(x0[i]) + b * static_cast<double>(eps[i]));
  return xt;
}

struct InterpolateOptions {
  /// Share one forward-noise draw between both endpoints.
  bool correlated_noise = false;
  SamplerOptions sampler;
};

/// Mixes q(x_t | x0_a) and q(x_t | x0_b) draws at t_mix with weight lambda, then reverses to x_0.
/// At lambda = 0 or 1 only the used endpoint is noised, so the result equals denoising that
/// endpoint's forward draw from the same stream.
template <class Real>
Tensor<Real> interpolate(const BatchPredictor<Real>& eps_theta, const VarianceSchedule& sched,
                         const Tensor<Real>& x0_a, const Tensor<Real>& x0_b, double lambda, std::size_t t_mix,
                         Rng& rng, const InterpolateOptions& opt = {}) {
  require(lambda >= 0.0 && lambda <= 1.0, "interpolate: lambda must lie in [0, 1]");
  x0_a.check_same(x0_b, "interpolate: endpoint shapes");
  require(t_mix >= 1 && t_mix <= sched.T(), "interpolate: t_mix out of range");
  Tensor<Real> xt;
  if (lambda == 0.0) {
    xt = diffuse_to(x0_a, t_mix, sched, rng);
  } else if (lambda == 1.0) {
    xt = diffuse_to(x0_b, t_mix, sched, rng);
  } else if (opt.correlated_noise) {
    Tensor<Real> mixed(x0_a.shape());
    for (std::size_t i = 0; i < mixed.size(); ++i)
      mixed[i] = static_cast<Real>((1.0 - lambda) * x0_a[i] + lambda * x0_b[i]);
    xt = diffuse_to(mixed, t_mix, sched, rng);
  } else {
    const auto xa = diffuse_to(x0_a, t_mix, sched, rng);
    const auto xb = diffuse_to(x0_b, t_mix, sched, rng);
    xt = Tensor<Real>(xa.shape());
    for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = static_cast<Real>((1.0 - lambda) * xa[i] + lambda * xb[i]);
  }
  return denoise(eps_theta, sched, std::move(xt), t_mix, rng, opt.sampler);
}

}  // namespace diffwave
