#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "diffwave/autograd.hpp"
#include "diffwave/rng.hpp"

namespace diffwave {

struct GradCheckOptions {
  double h = 1e-5;
  /// Denominator floor of the relative error, so all-zero gradients compare by absolute error.
  double abs_floor = 1e-6;
  /// 0 checks every element; otherwise a seeded subset per tensor.
  std::size_t max_elements_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::map<std::string, double> max_rel_error;  // per parameter tensor
  double worst = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Builds the loss on a tape; must call no backward itself.
template <class Real>
using LossBuilder = std::function<Var<Real>(Tape<Real>&, ParamStore<Real>&)>;

/// Compares reverse-mode gradients against central differences (f(p+h) - f(p-h)) / 2h.
/// Per tensor the error is max_i |n_i - a_i| / max(max_i |n_i|, max_i |a_i|, abs_floor), which keeps the
/// O(eps |f| / h) roundoff of the differences from dominating elements whose gradient is near zero.
template <class Real>
GradCheckReport finite_difference_check(const LossBuilder<Real>& build, ParamStore<Real>& params,
                                        const GradCheckOptions& opt = {}) {
  params.zero_grad();
  {
    Tape<Real> tape;
    grad(build(tape, params));
  }
  auto eval = [&]() -> double {
    Tape<Real> tape(false);
    return static_cast<double>(build(tape, params).value()[0]);
  };

  GradCheckReport report;
  Rng rng(opt.seed);
  for (auto& e : params.entries()) {
    std::vector<std::size_t> idx(e.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_elements_per_param && idx.size() > opt.max_elements_per_param) {
      for (std::size_t i = 0; i < opt.max_elements_per_param; ++i)
        std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                        static_cast<std::int64_t>(idx.size() - 1)))]);
      idx.resize(opt.max_elements_per_param);
    }
    double max_diff = 0.0, scale = opt.abs_floor;
    for (std::size_t i : idx) {
      const Real saved = e.value[i];
      e.value[i] = static_cast<Real>(saved + opt.h);
      const double fp = eval();
      e.value[i] = static_cast<Real>(saved - opt.h);
      const double fm = eval();
      e.value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double analytic = static_cast<double>(e.grad[i]);
      max_diff = std::max(max_diff, std::abs(numeric - analytic));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic)});
      ++report.checked;
    }
    const double worst = max_diff / scale;
    report.max_rel_error[e.name] = worst;
    if (worst >= report.worst) {
      report.worst = worst;
      report.worst_param = e.name;
    }
  }
  return report;
}

}  // namespace diffwave
