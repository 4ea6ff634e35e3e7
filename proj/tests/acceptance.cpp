// Acceptance suite: one PASS/FAIL line per criterion, selected with --criterion N.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "diffwave/diffwave.hpp"

namespace fs = std::filesystem;
using namespace diffwave;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    detail << (detail.tellp() > 0 ? "; " : "") << what << (ok ? "" : " [miss]");
  }
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

fs::path g_cache = "acceptance_cache";

// ---------------------------------------------------------------------------
// Shared toy setup

const std::set<std::size_t> kToneBins = {20, 30, 40, 55, 70, 85, 100, 120, 140, 160};

CorpusSpec toy_corpus(std::uint64_t seed, std::size_t n) {
  auto spec = default_tone_corpus();
  spec.num_utterances = n;
  spec.seed = seed;
  return spec;
}

RunConfig toy_config(Conditioning mode) {
  RunConfig c;
  c.model.n_layers = 12;
  c.model.residual_channels = 32;
  c.model.dilation_cycle_length = 6;
  c.model.T = 50;
  c.model.conditioning = mode;
  c.model.mel_bands = 40;
  c.training.learning_rate = 1e-3;
  c.training.batch_size = 8;
  c.training.max_steps = 20000;
  c.training.seed = 1;
  c.training.crop_length = 1024;
  c.sample_rate = 4000;
  return c;
}

/// Trains (or reuses a cached checkpoint of) the given toy model; returns the losses when trained here.
std::vector<LossRecord> train_toy(const RunConfig& cfg, const TrainingSet& data, const fs::path& ck,
                                  TrainState<float>& state, bool reuse) {
  if (reuse && fs::exists(ck)) {
    try {
      auto cached = load_checkpoint<float>(ck);
      if (cached.config == cfg && cached.step == cfg.training.max_steps) {
        state = std::move(cached);
        return {};
      }
    } catch (const Error&) {
    }
  }
  state = TrainState<float>::initial(cfg);
  FitOptions opt;
  opt.checkpoint_path = ck;
  double acc = 0.0;
  opt.on_step = [&](const LossRecord& r) {
    acc += r.loss;
    if (r.step % 1000 == 0) {
      std::cerr << "  step " << r.step << " mean loss " << acc / 1000.0 << '\n';
      acc = 0.0;
    }
  };
  return fit(data, state, opt);
}

double spectral_pass_rate(const BatchPredictor<float>& pred, const RunConfig& cfg, bool fast) {
  const auto sched = cfg.build_schedule();
  const auto fsched = build_fast_schedule(cfg.etas(), sched);
  Rng rng(99);
  std::size_t ok = 0;
  constexpr std::size_t total = 200, batch = 25, L = 1024;
  for (std::size_t c = 0; c < total / batch; ++c) {
    const auto x = fast ? fast_sample<float>(pred, fsched, batch, L, rng) : sample<float>(pred, sched, batch, L, rng);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> v(x.vec().begin() + static_cast<std::ptrdiff_t>(b * L),
                            x.vec().begin() + static_cast<std::ptrdiff_t>((b + 1) * L));
      ok += kToneBins.count(dominant_fft_bin(v));
    }
  }
  return static_cast<double>(ok) / total;
}

template <class Real>
DiffWave<Real> random_network(DiffWaveConfig cfg, std::uint64_t seed) {
  DiffWave<Real> m(cfg, seed);
  Rng rng(seed + 1000);
  for (auto& e : m.params().entries())
    if (e.name.rfind("head.out", 0) == 0)
      for (auto& v : e.value.vec()) v = static_cast<Real>(0.5 * rng.normal());
  return m;
}

// ---------------------------------------------------------------------------
// Criteria

void schedule_algebra(Outcome& o) {
  double worst = 0.0;
  for (auto [T, b0, b1] : {std::tuple{4, 1e-4, 0.05}, std::tuple{50, 1e-4, 0.05}, std::tuple{200, 1e-4, 0.02}}) {
    const auto s = build_linear_schedule(static_cast<std::size_t>(T), b0, b1);
    for (std::size_t t = 1; t <= s.T(); ++t) worst = std::max(worst, variance_identity_residual(s, t));
  }
  o.check(worst < 1e-12, "identity max rel residual " + fmt(worst));
  const double ab = build_linear_schedule(200, 1e-4, 0.02).alpha_bar(200);
  o.check(ab < 1e-4, "alpha_bar_200 = " + fmt(ab) + " (needs < 1e-4)");
}

void forward_marginal(Outcome& o) {
  constexpr std::size_t n = 100000, L = 8, T = 50;
  const auto s = build_linear_schedule(T, 1e-4, 0.05);
  const std::vector<double> x0{-1.0, -0.6, -0.2, 0.0, 0.1, 0.4, 0.7, 1.0};
  const std::size_t steps[] = {1, T / 2, T};
  std::vector<double> sum(3 * L, 0.0), sq(3 * L, 0.0);
  Rng rng(2024);
  for (std::size_t c = 0; c < n; ++c) {
    const auto traj = simulate_diffusion_chain(x0, s, rng);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < L; ++i) {
        const double v = traj[steps[k] - 1][i];
        sum[k * L + i] += v;
        sq[k * L + i] += v * v;
      }
  }
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double ab = s.alpha_bar(steps[k]), var = 1.0 - ab;
    for (std::size_t i = 0; i < L; ++i) {
      const double m = sum[k * L + i] / n;
      const double v = (sq[k * L + i] - n * m * m) / (n - 1);
      worst_mean = std::max(worst_mean, std::abs(m - std::sqrt(ab) * x0[i]) / std::sqrt(var / n));
      worst_var = std::max(worst_var, std::abs(v - var) / (var * std::sqrt(2.0 / (n - 1))));
    }
  }
  o.check(worst_mean < 4.0, "worst mean deviation " + fmt(worst_mean, 3) + " SE");
  o.check(worst_var < 4.0, "worst variance deviation " + fmt(worst_var, 3) + " SE");
}

void elbo_cross_check(Outcome& o) {
  const auto s = build_linear_schedule(3, 0.1, 0.3);
  const EpsPredictor linear = [](std::span<const double> xt, std::size_t t) {
    std::vector<double> e(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) e[i] = (0.3 + 0.1 * static_cast<double>(t)) * xt[i];
    return e;
  };
  const auto data = DataSampler::finite({{0.5, -0.2}, {-0.3, 0.8}, {0.1, 0.1}});
  Rng r1(31), r2(32);
  const auto cf = elbo_closed_form(linear, data, s, 100000, r1);
  const auto mc = elbo_monte_carlo(linear, data, s, 100000, r2);
  const double se = std::hypot(cf.total_stderr, mc.std_error);
  const double z = std::abs(cf.total_neg_elbo - mc.estimate) / se;
  o.check(z < 3.0, "closed form " + fmt(cf.total_neg_elbo, 8) + " vs Monte Carlo " + fmt(mc.estimate, 8) + " (" +
                       fmt(z, 3) + " SE)");
}

void gradient_fidelity(Outcome& o) {
  DiffWaveConfig cfg;
  cfg.n_layers = 2;
  cfg.residual_channels = 4;
  cfg.dilation_cycle_length = 2;
  cfg.T = 10;
  DiffWave<double> model(cfg, 3);
  Rng rng(4);
  for (auto& e : model.params().entries())
    if (e.name.rfind("head.out", 0) == 0 || e.name.find("bias") != std::string::npos)
      for (auto& v : e.value.vec()) v = 0.3 * rng.normal();
  Tensor<double> x({2, 1, 16}), eps({2, 1, 16});
  rng.fill_normal(x.span());
  rng.fill_normal(eps.span());
  const LossBuilder<double> f = [&](Tape<double>& t, ParamStore<double>&) {
    return ops::squared_error(model.forward(t, x, {3.0, 7.5}), eps);
  };
  GradCheckOptions opt;
  opt.max_elements_per_param = 256;
  const auto report = finite_difference_check(f, model.params(), opt);
  o.check(report.worst < 1e-4, "max rel error " + fmt(report.worst, 3) + " at " + report.worst_param + " over " +
                                   std::to_string(report.max_rel_error.size()) + " tensors, " +
                                   std::to_string(report.checked) + " elements");
}

void analytic_sampler(Outcome& o) {
  const auto s = build_linear_schedule(50, 1e-4, 0.05);
  const BatchPredictor<double> oracle = [&s](const Tensor<double>& x, double t) {
    Tensor<double> e(x.shape());
    const double c = std::sqrt(1.0 - s.alpha_bar(static_cast<std::size_t>(t)));
    for (std::size_t i = 0; i < x.size(); ++i) e[i] = c * x[i];
    return e;
  };
  constexpr std::size_t n = 10000, L = 16;
  Rng rng(5);
  const auto x = sample<double>(oracle, s, n, L, rng);
  double worst_mean = 0.0, worst_var = 0.0, lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < L; ++i) {
    double m = 0.0, m2 = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      m += x[b * L + i];
      m2 += x[b * L + i] * x[b * L + i];
    }
    m /= n;
    const double v = (m2 - n * m * m) / (n - 1);
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_var = std::max(worst_var, std::abs(v - 1.0));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  o.check(worst_mean <= 0.02, "max |mean| " + fmt(worst_mean, 4));
  o.check(worst_var <= 0.05, "variance range [" + fmt(lo, 4) + ", " + fmt(hi, 4) + "] vs 1 +- 0.05");
}

void fast_identity(Outcome& o) {
  const auto s = build_linear_schedule(50, 1e-4, 0.05);
  const auto fast = build_fast_schedule(s.betas(), s);
  DiffWaveConfig cfg;
  cfg.n_layers = 6;
  cfg.residual_channels = 8;
  cfg.dilation_cycle_length = 3;
  cfg.T = 50;
  auto md = random_network<double>(cfg, 11);
  auto mf = random_network<float>(cfg, 11);
  Rng a(1), b(1), c(2), d(2);
  const bool dbl = sample<double>(model_predictor(md), s, 3, 256, a) == fast_sample<double>(model_predictor(md), fast, 3, 256, b);
  const bool flt = sample<float>(model_predictor(mf), s, 3, 256, c) == fast_sample<float>(model_predictor(mf), fast, 3, 256, d);
  o.check(dbl, "float64 outputs bit-identical");
  o.check(flt, "float32 outputs bit-identical");
}

void receptive_field_check(Outcome& o) {
  DiffWaveConfig base;
  const auto r = receptive_field(base);
  o.check(r == 6139, "formula r = " + std::to_string(r));

  // Finite perturbations of ~1e-20 relative size vanish below one ulp at the far edge of a
  // 30-layer stack, so the span is read from the exact input gradient of one output position.
  auto reach = [](const DiffWaveConfig& cfg, std::size_t L, bool finite) {
    auto m = random_network<double>(cfg, 21);
    Tensor<double> x({1, 1, L});
    Rng rng(22);
    rng.fill_normal(x.span());
    const std::size_t p = L / 2;
    std::vector<bool> hit(L, false);
    if (finite) {
      const auto y0 = m.predict(x, 7.0);
      x[p] += 0.5;
      const auto y1 = m.predict(x, 7.0);
      for (std::size_t i = 0; i < L; ++i) hit[i] = y0[i] != y1[i];
    } else {
      ParamStore<double> input;
      input.add("x", x);
      Tape<double> tape;
      const auto y = m.forward(tape, tape.param(input, "x"), {7.0});
      Tensor<double> pick(y.shape());
      pick[p] = 1.0;
      grad(ops::sum(ops::mul(y, tape.constant(std::move(pick)))));
      for (std::size_t i = 0; i < L; ++i) hit[i] = input.grad("x")[i] != 0.0;
    }
    std::size_t lo = L, hi = 0;
    for (std::size_t i = 0; i < L; ++i)
      if (hit[i]) lo = std::min(lo, i), hi = std::max(hi, i);
    return hi >= lo ? hi - lo + 1 : 0;
  };
  DiffWaveConfig small;
  small.n_layers = 8;
  small.residual_channels = 8;
  small.dilation_cycle_length = 4;
  const auto rs = receptive_field(small), es = reach(small, 128, true), gs = reach(small, 128, false);
  o.check(es == rs && gs == rs, "8-layer perturbation reach " + std::to_string(es) + ", gradient reach " +
                                    std::to_string(gs) + " vs formula " + std::to_string(rs));
  const auto eb = reach(base, 8192, false);
  o.check(eb == r, "base-model gradient reach " + std::to_string(eb) + " vs formula " + std::to_string(r));
}

void toy_unconditional(Outcome& o) {
  const auto cfg = toy_config(Conditioning::None);
  const auto data = TrainingSet::from_corpus(generate_tone_corpus(toy_corpus(7, 200)));
  TrainState<float> state;
  const auto t0 = std::chrono::steady_clock::now();
  const auto curve = train_toy(cfg, data, g_cache / "toy_unconditional.bin", state, false);
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    first += curve[i].loss / 1000.0;
    last += curve[curve.size() - 1000 + i].loss / 1000.0;
  }
  o.check(last < 0.35 * first, "loss first-1k " + fmt(first, 5) + " final-1k " + fmt(last, 5) + " ratio " +
                                   fmt(last / first, 3));
  const double rate = spectral_pass_rate(model_predictor(state.model), cfg, false);
  o.check(rate >= 0.8, "spectral pass rate " + fmt(rate, 3));
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.check(total < 7200.0, "training " + fmt(train_s, 4) + " s, total " + fmt(total, 4) + " s");
}

void fast_vs_full(Outcome& o) {
  const auto cfg = toy_config(Conditioning::None);
  const auto data = TrainingSet::from_corpus(generate_tone_corpus(toy_corpus(7, 200)));
  TrainState<float> state;
  train_toy(cfg, data, g_cache / "toy_unconditional.bin", state, true);
  const auto pred = model_predictor(state.model);
  const double full = spectral_pass_rate(pred, cfg, false), fast = spectral_pass_rate(pred, cfg, true);
  o.check(std::abs(full - fast) <= 0.10, "full " + fmt(full, 3) + " vs 6-step fast " + fmt(fast, 3));
}

void toy_vocoder(Outcome& o) {
  auto cfg = toy_config(Conditioning::Mel);
  const auto data = TrainingSet::from_corpus(generate_tone_corpus(toy_corpus(7, 200)), cfg.model);
  TrainState<float> state;
  train_toy(cfg, data, g_cache / "toy_vocoder.bin", state, true);

  const auto held = generate_tone_corpus(toy_corpus(11, 100));
  const auto sched = cfg.build_schedule();
  Rng rng(123);
  std::size_t hits = 0;
  constexpr std::size_t batch = 20;
  for (std::size_t first = 0; first < held.size(); first += batch) {
    std::vector<Tensor<float>> mels;
    for (std::size_t b = 0; b < batch; ++b) mels.push_back(mel_features<float>(held[first + b].wave.samples, data.mel));
    const auto mel = stack(mels);
    Conditioner<float> cond;
    cond.mel = &mel;
    const auto x = sample<float>(model_predictor(state.model, cond), sched, batch, 1024, rng);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> v(x.vec().begin() + static_cast<std::ptrdiff_t>(b * 1024),
                            x.vec().begin() + static_cast<std::ptrdiff_t>((b + 1) * 1024));
      hits += dominant_fft_bin(v) == dominant_fft_bin(held[first + b].wave.samples);
    }
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(held.size());
  o.check(rate >= 0.9, "dominant bin reproduced for " + fmt(rate, 3) + " of " + std::to_string(held.size()) +
                           " held-out conditioners");
}

void metrics_suite(Outcome& o) {
  const Matrix a = (Matrix(2, 1) << -std::sqrt(0.5), std::sqrt(0.5)).finished();
  const Matrix b = (Matrix(2, 1) << 1.0 - std::sqrt(2.0), 1.0 + std::sqrt(2.0)).finished();
  const double f = fid(a, b);
  o.check(std::abs(f - 2.0) < 1e-12, "FID " + fmt(f, 15));

  Matrix onehot = Matrix::Zero(50, 10);
  for (Eigen::Index i = 0; i < 50; ++i) onehot(i, i % 10) = 1.0;
  const Matrix uniform = Matrix::Constant(30, 10, 0.1);
  const double is_u = inception_score(uniform), is_h = inception_score(onehot);
  o.check(std::abs(is_u - 1.0) < 1e-9 && std::abs(is_h - 10.0) < 1e-6, "IS " + fmt(is_u, 10) + " / " + fmt(is_h, 10));

  const Matrix two = (Matrix(2, 2) << 0.9, 0.1, 0.1, 0.9).finished();
  const double mis = modified_inception_score(two);
  o.check(std::abs(mis - 2.408) < 1e-3, "mIS " + fmt(mis, 10));

  const double am = am_score(onehot, uniform);
  o.check(std::abs(am - std::log(10.0)) < 1e-9, "AM " + fmt(am, 15));

  Matrix x(500, 3);
  Rng rng(4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const auto nd = ndb(x, x, 20);
  o.check(nd.ndb == 0, "ndb(train, train) " + std::to_string(nd.ndb));
}

void checkpoint_determinism(Outcome& o) {
  RunConfig cfg;
  cfg.model.n_layers = 4;
  cfg.model.residual_channels = 8;
  cfg.model.dilation_cycle_length = 2;
  cfg.model.T = 20;
  cfg.training.batch_size = 3;
  cfg.training.crop_length = 256;
  cfg.training.max_steps = 40;
  cfg.training.seed = 9;
  const auto data = TrainingSet::from_corpus(generate_tone_corpus(toy_corpus(3, 30)));

  auto full_state = TrainState<float>::initial(cfg);
  const auto full = fit(data, full_state);

  auto half_cfg = cfg;
  half_cfg.training.max_steps = 17;
  auto first = TrainState<float>::initial(half_cfg);
  auto curve = fit(data, first);
  const auto bytes = encode_checkpoint(first);
  auto resumed = decode_checkpoint<float>(bytes, "memory");
  o.check(encode_checkpoint(resumed) == bytes, "save-load-save byte-identical (" + std::to_string(bytes.size()) + " bytes)");
  resumed.config.training.max_steps = 40;
  const auto rest = fit(data, resumed);
  curve.insert(curve.end(), rest.begin(), rest.end());
  bool same = curve.size() == full.size();
  for (std::size_t i = 0; same && i < curve.size(); ++i) same = curve[i].step == full[i].step && curve[i].loss == full[i].loss;
  o.check(same, "resumed loss sequence identical over " + std::to_string(full.size()) + " steps");
  resumed.config.training.max_steps = full_state.config.training.max_steps;
  o.check(encode_checkpoint(resumed) == encode_checkpoint(full_state), "final checkpoints identical");
}

struct Criterion {
  const char* name;
  double time_limit_s;  // 0: none
  std::function<void(Outcome&)> run;
};

const std::map<int, Criterion>& criteria() {
  static const std::map<int, Criterion> c{
      {1, {"schedule algebra", 1.0, schedule_algebra}},
      {2, {"forward-marginal oracle", 60.0, forward_marginal}},
      {3, {"ELBO cross-check", 60.0, elbo_cross_check}},
      {4, {"gradient fidelity", 60.0, gradient_fidelity}},
      {5, {"analytic-sampler moments", 120.0, analytic_sampler}},
      {6, {"fast-sampling identity", 0.0, fast_identity}},
      {7, {"receptive field", 0.0, receptive_field_check}},
      {8, {"desk-scale unconditional training", 0.0, toy_unconditional}},
      {9, {"fast vs full on the toy model", 0.0, fast_vs_full}},
      {10, {"conditioned vocoding at toy scale", 0.0, toy_vocoder}},
      {11, {"metrics unit suite", 60.0, metrics_suite}},
      {12, {"checkpoint determinism", 0.0, checkpoint_determinism}},
  };
  return c;
}

bool run_one(int n) {
  const auto& c = criteria().at(n);
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    c.run(o);
  } catch (const std::exception& e) {
    o.check(false, std::string("exception: ") + e.what());
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (c.time_limit_s > 0) o.check(s < c.time_limit_s, "runtime under " + fmt(c.time_limit_s) + " s");
  std::printf("criterion %d %s: %s (%s; %.2f s)\n", n, o.pass ? "PASS" : "FAIL", c.name, o.detail.str().c_str(), s);
  std::fflush(stdout);
  return o.pass;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"Acceptance criteria"};
  std::vector<int> which;
  std::string cache = g_cache.string();
  app.add_option("--criterion", which, "Criteria to run (default: all)")->check(CLI::Range(1, 12));
  app.add_option("--cache-dir", cache, "Where trained toy checkpoints are kept");
  CLI11_PARSE(app, argc, argv);
  g_cache = cache;
  fs::create_directories(g_cache);
  if (which.empty())
    for (const auto& [n, c] : criteria()) which.push_back(n);
  bool all = true;
  for (int n : which) all = run_one(n) && all;
  return all ? 0 : 1;
}
