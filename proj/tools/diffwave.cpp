#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "diffwave/diffwave.hpp"

namespace fs = std::filesystem;
using namespace diffwave;
using nlohmann::json;

namespace {

struct Globals {
  bool strict = false;
};

void warn(const Globals& g, const std::string& msg) {
  if (g.strict) fail(ErrorKind::Validation, msg);
  std::cerr << "warning: " << msg << '\n';
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) fail(ErrorKind::Io, what + " '" + p.string() + "' does not exist");
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

json manifest(const std::string& command, const RunConfig& c) {
  return {{"spec_version", kSpecVersion}, {"command", command}, {"config", to_json(c)}};
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

std::string text_file(const fs::path& p) {
  const auto bytes = read_file(p);
  return {bytes.begin(), bytes.end()};
}

template <class F>
void with_precision(Precision p, F&& f) {
  if (p == Precision::Float64) f.template operator()<double>();
  else f.template operator()<float>();
}

// ---------------------------------------------------------------------------
// Configuration: flag > file > default (or the checkpoint's config when given)

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* app, ConfigArgs& a) {
  app->add_option("-c,--config", a.file, "Run configuration (JSON)");
  app->add_option("--set", a.sets, "Override one key as block.key=value (repeatable)");
}

json parse_value(const std::string& v) {
  try {
    return json::parse(v);
  } catch (const json::exception&) {
    return v;
  }
}

RunConfig load_config(const ConfigArgs& a, const RunConfig& base = {}) {
  json j = to_json(base);
  if (!a.file.empty()) {
    require_exists(a.file, "config file");
    j = to_json(parse_run_config(text_file(a.file)));
  }
  for (const auto& s : a.sets) {
    const auto eq = s.find('='), dot = s.find('.');
    require(eq != std::string::npos && dot < eq, "--set expects block.key=value, got '" + s + "'");
    j[s.substr(0, dot)][s.substr(dot + 1, eq - dot - 1)] = parse_value(s.substr(eq + 1));
  }
  auto c = run_config_from_json(j);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  ConfigArgs cfg;
  bool resume = false;
};

void cmd_train(const TrainArgs& a, const Globals& g) {
  const auto c = load_config(a.cfg);
  require(!c.paths.data_dir.empty(), "train: paths.data_dir is required");
  require(!c.paths.output_dir.empty(), "train: paths.output_dir is required");
  require_exists(c.paths.data_dir, "data directory");
  const fs::path out = c.paths.output_dir;
  const fs::path ck = c.paths.checkpoint.empty() ? out / "checkpoint.bin" : fs::path(c.paths.checkpoint);
  const fs::path curve_path = out / "loss.tsv";

  const auto corpus = load_corpus(c.paths.data_dir);
  if (corpus.empty()) fail(ErrorKind::Io, "train: no .wav files in '" + c.paths.data_dir + "'");
  for (const auto& u : corpus)
    if (u.wave.sample_rate != c.sample_rate) {
      warn(g, "train: " + u.path + " has sample rate " + std::to_string(u.wave.sample_rate) + ", config says " +
                  std::to_string(c.sample_rate));
      break;
    }
  for (const auto& u : corpus)
    if (u.wave.size() < c.training.crop_length) {
      warn(g, "train: " + u.path + " is shorter than the crop length and will be zero-padded");
      break;
    }
  const auto data = TrainingSet::from_corpus(corpus, c.model);

  with_precision(c.training.precision, [&]<class Real>() {
    auto state = TrainState<Real>::initial(c);
    std::vector<LossRecord> curve;
    if (a.resume && fs::exists(ck)) {
      state = load_checkpoint<Real>(ck);
      require(state.config.model == c.model && state.config.schedule == c.schedule,
              "train --resume: model or schedule differs from the checkpoint");
      state.config.training.max_steps = c.training.max_steps;
      state.config.training.checkpoint_interval = c.training.checkpoint_interval;
      state.config.paths = c.paths;
      if (fs::exists(curve_path))
        for (const auto& r : read_loss_curve(curve_path))
          if (r.step <= state.step) curve.push_back(r);
    }
    const std::uint64_t report = std::max<std::uint64_t>(1, c.training.max_steps / 20);
    FitOptions opt;
    opt.checkpoint_path = ck;
    opt.on_step = [&](const LossRecord& r) {
      curve.push_back(r);
      if (r.step % report == 0) std::cerr << "step " << r.step << " loss " << r.loss << '\n';
      if (c.training.checkpoint_interval && r.step % c.training.checkpoint_interval == 0)
        write_file_atomic(curve_path, format_loss_curve(curve));
    };
    fit(data, state, opt);
    write_file_atomic(curve_path, format_loss_curve(curve));
    auto m = manifest("train", state.config);
    m["steps"] = state.step;
    m["checkpoint"] = ck.string();
    m["loss_curve"] = curve_path.string();
    m["final_loss"] = curve.empty() ? json() : json(curve.back().loss);
    write_json(out / "train.json", m);
    std::cout << ck.string() << '\n';
  });
}

// ---------------------------------------------------------------------------
// Shared by the sampling commands

struct ModelArgs {
  std::string checkpoint;
  ConfigArgs cfg;
  std::uint64_t seed = 0;
  int label = -1;
  std::string condition;  // WAV file (denoise) or directory (sample) for mel conditioning
};

void add_model_options(CLI::App* app, ModelArgs& a) {
  app->add_option("--checkpoint", a.checkpoint, "Trained checkpoint (defaults to paths.checkpoint)");
  add_config_options(app, a.cfg);
  app->add_option("--seed", a.seed, "Sampling seed");
  app->add_option("--label", a.label, "Class label for label-conditioned models");
}

/// Resolves the checkpoint and its config, applying file and flag overrides that keep the architecture.
std::pair<fs::path, RunConfig> resolve_model(const ModelArgs& a, const std::string& command) {
  fs::path ck = a.checkpoint;
  if (ck.empty() && !a.cfg.file.empty()) {
    require_exists(a.cfg.file, "config file");
    ck = parse_run_config(text_file(a.cfg.file)).paths.checkpoint;
  }
  require(!ck.empty(), command + ": --checkpoint (or paths.checkpoint) is required");
  require_exists(ck, "checkpoint");
  const auto stored = peek_checkpoint_config(ck);
  auto c = load_config(a.cfg, stored);
  require(c.model == stored.model && c.schedule == stored.schedule && c.training.precision == stored.training.precision,
          command + ": model, schedule and precision must match the checkpoint");
  return {ck, c};
}

std::vector<int> labels_for(const RunConfig& c, const ModelArgs& a, std::size_t first, std::size_t n) {
  if (c.model.conditioning != Conditioning::Label) {
    require(a.label < 0, "--label given but the model is not label-conditioned");
    return {};
  }
  require(a.label < static_cast<int>(c.model.label_count), "--label out of range");
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(a.label >= 0 ? a.label : static_cast<int>((first + i) % c.model.label_count));
  return out;
}

template <class Real>
Tensor<Real> as_batch(const std::vector<double>& x) {
  Tensor<Real> t({1, 1, x.size()});
  for (std::size_t i = 0; i < x.size(); ++i) t[i] = static_cast<Real>(x[i]);
  return t;
}

std::vector<double> row(const auto& x, std::size_t b) {
  const std::size_t L = x.dim(2);
  std::vector<double> v(L);
  for (std::size_t i = 0; i < L; ++i) v[i] = static_cast<double>(x[b * L + i]);
  return v;
}

void write_output(const Globals& g, const fs::path& path, std::vector<double> samples, std::uint32_t sr) {
  std::size_t clipped = 0;
  for (double v : samples) clipped += std::abs(v) > 1.0;
  if (clipped) warn(g, path.filename().string() + ": " + std::to_string(clipped) + " samples clipped to [-1, 1]");
  write_wav({std::move(samples), sr}, path);
}

// ---------------------------------------------------------------------------
// sample / fast-sample

struct SampleArgs {
  ModelArgs model;
  std::size_t n = 1;
  std::size_t length = 16000;
  std::size_t batch = 8;
  std::string out;
  std::vector<double> etas;
  bool final_noise = false;
};

void cmd_sample(const SampleArgs& a, const Globals& g, bool fast) {
  const std::string command = fast ? "fast-sample" : "sample";
  auto [ck, c] = resolve_model(a.model, command);
  if (!a.etas.empty()) c.fast_etas = a.etas;
  require(!a.out.empty(), command + ": --out is required");
  require(a.n >= 1 && a.length >= 1 && a.batch >= 1, command + ": --n, --length and --batch must be positive");
  const auto sched = c.build_schedule();
  std::optional<FastSchedule> fsched;
  if (fast) {
    fsched = build_fast_schedule(c.etas(), sched);
    if (fsched->gamma_bar(fsched->T_infer()) > 0.1)
      warn(g, "fast-sample: final gamma_bar " + num(fsched->gamma_bar(fsched->T_infer())) +
                  " leaves the latent far from N(0, I)");
  }
  const bool mel = c.model.conditioning == Conditioning::Mel;
  std::vector<LabeledWave> conditioners;
  if (mel) {
    require(!a.model.condition.empty(), command + ": mel-conditioned model needs --condition <dir of wavs>");
    require_exists(a.model.condition, "condition directory");
    conditioners = load_corpus(a.model.condition);
    if (conditioners.empty()) fail(ErrorKind::Io, command + ": no conditioning wavs in '" + a.model.condition + "'");
  }
  const std::size_t n = mel ? conditioners.size() : a.n;
  const std::size_t batch = mel ? 1 : a.batch;
  SamplerOptions opt;
  opt.noise_at_final_step = a.final_noise;

  json files = json::array();
  std::ostringstream tsv;
  with_precision(c.training.precision, [&]<class Real>() {
    auto state = load_checkpoint<Real>(ck);
    const auto melc = vocoder_mel_config(c.sample_rate, c.model.mel_bands);
    Rng rng(a.model.seed);
    for (std::size_t first = 0; first < n; first += batch) {
      const std::size_t B = std::min(batch, n - first);
      Conditioner<Real> cond;
      cond.labels = labels_for(c, a.model, first, B);
      Tensor<Real> m;
      std::size_t L = a.length;
      if (mel) {
        m = mel_features<Real>(conditioners[first].wave.samples, melc);
        cond.mel = &m;
        L = conditioners[first].wave.size();
      }
      const auto pred = model_predictor(state.model, cond);
      const auto x = fast ? fast_sample<Real>(pred, *fsched, B, L, rng, opt) : sample<Real>(pred, sched, B, L, rng, opt);
      for (std::size_t b = 0; b < B; ++b) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%05zu.wav", first + b);
        write_output(g, fs::path(a.out) / name, row(x, b), c.sample_rate);
        const int label = cond.labels.empty() ? -1 : cond.labels[b];
        json f{{"path", name}, {"label", label}};
        if (mel) f["condition"] = conditioners[first].path;
        files.push_back(f);
        tsv << name << '\t' << label << '\n';
      }
    }
  });
  write_file_atomic(fs::path(a.out) / kManifestName, tsv.str());
  auto m = manifest(command, c);
  m["checkpoint"] = ck.string();
  m["seed"] = a.model.seed;
  m["batch"] = batch;
  m["final_step_noise"] = a.final_noise;
  if (fast) m["etas"] = c.etas();
  m["files"] = files;
  write_json(fs::path(a.out) / (command + ".json"), m);
}

// ---------------------------------------------------------------------------
// denoise

struct DenoiseArgs {
  ModelArgs model;
  std::string input, output;
  std::size_t t_start = 25;
};

template <class Real>
Conditioner<Real> single_conditioner(const RunConfig& c, const ModelArgs& a, const std::vector<double>& fallback,
                                     Tensor<Real>& mel_storage) {
  Conditioner<Real> cond;
  cond.labels = labels_for(c, a, 0, 1);
  if (c.model.conditioning == Conditioning::Label)
    require(a.label >= 0, "label-conditioned model needs --label");
  if (c.model.conditioning == Conditioning::Mel) {
    std::vector<double> src = fallback;
    if (!a.condition.empty()) {
      require_exists(a.condition, "condition file");
      src = read_wav(a.condition).samples;
    }
    mel_storage = mel_features<Real>(src, vocoder_mel_config(c.sample_rate, c.model.mel_bands));
    cond.mel = &mel_storage;
  }
  return cond;
}

void cmd_denoise(const DenoiseArgs& a, const Globals& g) {
  const auto [ck, c] = resolve_model(a.model, "denoise");
  require(!a.output.empty(), "denoise: --output is required");
  require_exists(a.input, "input");
  const auto in = read_wav(a.input);
  if (in.sample_rate != c.sample_rate)
    warn(g, "denoise: input sample rate " + std::to_string(in.sample_rate) + " differs from the model's " +
                std::to_string(c.sample_rate));
  with_precision(c.training.precision, [&]<class Real>() {
    auto state = load_checkpoint<Real>(ck);
    Tensor<Real> mel;
    const auto cond = single_conditioner<Real>(c, a.model, in.samples, mel);
    Rng rng(a.model.seed);
    const auto y = denoise<Real>(model_predictor(state.model, cond), c.build_schedule(), as_batch<Real>(in.samples),
                                 a.t_start, rng);
    write_output(g, a.output, row(y, 0), in.sample_rate);
  });
  auto m = manifest("denoise", c);
  m["checkpoint"] = ck.string();
  m["input"] = a.input;
  m["t_start"] = a.t_start;
  m["seed"] = a.model.seed;
  write_json(fs::path(a.output).string() + ".json", m);
}

// ---------------------------------------------------------------------------
// interpolate

struct InterpolateArgs {
  ModelArgs model;
  std::string a, b, out;
  std::vector<double> lambdas{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t t_mix = 50;
  bool correlated = false;
};

void cmd_interpolate(const InterpolateArgs& a, const Globals& g) {
  const auto [ck, c] = resolve_model(a.model, "interpolate");
  require(!a.out.empty(), "interpolate: --out is required");
  require_exists(a.a, "input");
  require_exists(a.b, "input");
  const auto wa = read_wav(a.a), wb = read_wav(a.b);
  require(wa.size() == wb.size(), "interpolate: inputs must have the same length");
  json files = json::array();
  with_precision(c.training.precision, [&]<class Real>() {
    auto state = load_checkpoint<Real>(ck);
    Tensor<Real> mel;
    const auto cond = single_conditioner<Real>(c, a.model, wa.samples, mel);
    const auto pred = model_predictor(state.model, cond);
    const auto sched = c.build_schedule();
    const auto xa = as_batch<Real>(wa.samples), xb = as_batch<Real>(wb.samples);
    InterpolateOptions opt;
    opt.correlated_noise = a.correlated;
    for (std::size_t i = 0; i < a.lambdas.size(); ++i) {
      Rng rng(a.model.seed);
      const auto y = interpolate<Real>(pred, sched, xa, xb, a.lambdas[i], a.t_mix, rng, opt);
      char name[32];
      std::snprintf(name, sizeof name, "interp_%03zu.wav", i);
      write_output(g, fs::path(a.out) / name, row(y, 0), wa.sample_rate);
      files.push_back({{"path", name}, {"lambda", a.lambdas[i]}});
    }
  });
  auto m = manifest("interpolate", c);
  m["checkpoint"] = ck.string();
  m["inputs"] = {a.a, a.b};
  m["t_mix"] = a.t_mix;
  m["seed"] = a.model.seed;
  m["correlated_noise"] = a.correlated;
  m["files"] = files;
  write_json(fs::path(a.out) / "interpolate.json", m);
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string generated, reference, classifier, save_classifier, out;
  std::size_t ndb_bins = 50;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
};

void cmd_evaluate(const EvaluateArgs& a, const Globals& g) {
  require_exists(a.generated, "generated directory");
  require_exists(a.reference, "reference directory");
  const auto gen = load_corpus(a.generated), ref = load_corpus(a.reference);
  if (gen.empty() || ref.empty()) fail(ErrorKind::Io, "evaluate: both directories must contain .wav files");
  const auto sr = ref.front().wave.sample_rate;
  for (const auto* set : {&gen, &ref})
    for (const auto& u : *set)
      require(u.wave.sample_rate == sr, "evaluate: mixed sample rates (" + u.path + ")");

  auto split = [](const std::vector<LabeledWave>& c, std::vector<std::vector<double>>& w, std::vector<int>& l) {
    for (const auto& u : c) {
      w.push_back(u.wave.samples);
      l.push_back(u.label);
    }
  };
  std::vector<std::vector<double>> gw, rw;
  std::vector<int> gl, rl;
  split(gen, gw, gl);
  split(ref, rw, rl);
  const auto labelled = [](const std::vector<int>& l) {
    return std::all_of(l.begin(), l.end(), [](int v) { return v >= 0; });
  };

  ToneClassifier clf;
  if (!a.classifier.empty()) {
    require_exists(a.classifier, "classifier");
    clf = ToneClassifier::load(a.classifier, classifier_mel_config(sr));
    require(clf.config().mel.sample_rate == sr, "evaluate: classifier was trained at a different sample rate");
  } else {
    require(labelled(rl), "evaluate: reference set needs labels (manifest.tsv) to train a classifier; or pass --classifier");
    ClassifierConfig cc;
    cc.num_classes = static_cast<std::size_t>(*std::max_element(rl.begin(), rl.end()) + 1);
    cc.mel = classifier_mel_config(sr);
    cc.epochs = a.epochs;
    cc.seed = a.seed;
    clf = ToneClassifier(cc);
    clf.train(rw, rl);
    if (!a.save_classifier.empty()) clf.save(a.save_classifier);
  }

  Matrix fg, pg, fr, pr;
  extract_all(clf, gw, fg, pg);
  extract_all(clf, rw, fr, pr);
  if (gw.size() <= clf.feature_dim() || rw.size() <= clf.feature_dim())
    warn(g, "evaluate: fewer samples than feature dimensions; covariance estimates are rank-deficient");

  std::size_t K = a.ndb_bins;
  if (K > rw.size()) {
    warn(g, "evaluate: ndb bins reduced to the reference set size " + std::to_string(rw.size()));
    K = rw.size();
  }
  MetricReport r;
  r.fid = fid(fg, fr);
  r.is = inception_score(pg);
  r.mis = modified_inception_score(pg);
  r.am = am_score(pr, pg);
  const auto nd = ndb(fr, fg, K, 0.05, a.seed);
  r.ndb = nd.ndb;
  r.ndb_over_k = nd.ndb_over_k;
  if (labelled(gl) && labelled(rl)) {
    const bool in_range = std::all_of(gl.begin(), gl.end(), [&](int v) { return static_cast<std::size_t>(v) < clf.num_classes(); });
    require(in_range, "evaluate: generated labels exceed the classifier's classes");
    const auto fc = fid_class(group_by_label(fg, gl), group_by_label(fr, rl));
    r.fid_class_mean = fc.mean;
    r.fid_class_std = fc.std;
    r.accuracy = classifier_accuracy(clf, gw, gl);
  }
  r.config = {{"ndb_bins", K},
              {"ndb_significance", 0.05},
              {"seed", a.seed},
              {"classifier", a.classifier.empty() ? json("trained on reference") : json(a.classifier)},
              {"n_generated", gw.size()},
              {"n_reference", rw.size()}};
  auto j = r.to_json();
  j["spec_version"] = kSpecVersion;
  if (a.out.empty()) std::cout << j.dump(2) << '\n';
  else write_json(a.out, j);
}

// ---------------------------------------------------------------------------
// inspect-schedule / receptive-field

struct InspectArgs {
  ConfigArgs cfg;
  std::optional<std::size_t> T;
  std::optional<double> beta_start, beta_end;
  std::vector<double> etas;
  bool fast = false;
  std::string out;
};

void cmd_inspect(const InspectArgs& a) {
  auto c = load_config(a.cfg);
  if (a.T) c.model.T = *a.T;
  if (a.beta_start) c.schedule.beta_start = *a.beta_start;
  if (a.beta_end) c.schedule.beta_end = *a.beta_end;
  if (!a.etas.empty()) c.fast_etas = a.etas;
  c.validate();
  const auto s = c.build_schedule();
  std::ostringstream os;
  os << "t,beta,alpha_bar,beta_tilde,t_align\n";
  if (a.fast) {
    const auto f = build_fast_schedule(c.etas(), s);
    for (std::size_t i = 1; i <= f.T_infer(); ++i)
      os << i << ',' << num(f.eta(i)) << ',' << num(f.gamma_bar(i)) << ',' << num(f.eta_tilde(i)) << ','
         << num(f.aligned_step(i)) << '\n';
  } else {
    for (std::size_t t = 1; t <= s.T(); ++t)
      os << t << ',' << num(s.beta(t)) << ',' << num(s.alpha_bar(t)) << ',' << num(s.beta_tilde(t)) << ',' << t << '\n';
  }
  if (a.out.empty()) std::cout << os.str();
  else write_file_atomic(a.out, os.str());
}

struct FieldArgs {
  ConfigArgs cfg;
  std::optional<std::size_t> layers, kernel, cycle;
};

void cmd_receptive_field(const FieldArgs& a) {
  auto c = load_config(a.cfg);
  if (a.layers) c.model.n_layers = *a.layers;
  if (a.kernel) c.model.kernel_size = *a.kernel;
  if (a.cycle) c.model.dilation_cycle_length = *a.cycle;
  c.model.validate();
  std::cout << receptive_field(c.model) << '\n';
}

// ---------------------------------------------------------------------------
// make-corpus

struct CorpusArgs {
  std::string out;
  CorpusSpec spec = default_tone_corpus();
  std::vector<std::size_t> bins;
  bool fixed_phase = false;
};

void cmd_make_corpus(CorpusArgs a, const Globals& g) {
  require(!a.out.empty(), "make-corpus: --out is required");
  if (!a.bins.empty()) a.spec.frequencies = bin_frequencies(a.bins, a.spec.length, a.spec.sample_rate);
  a.spec.random_phase = !a.fixed_phase;
  for (double f : a.spec.frequencies) {
    const double bin = f * static_cast<double>(a.spec.length) / a.spec.sample_rate;
    if (std::abs(bin - std::round(bin)) > 1e-9) {
      warn(g, "make-corpus: " + num(f) + " Hz does not fall on a DFT bin of a " + std::to_string(a.spec.length) +
                  "-sample clip");
      break;
    }
  }
  make_synthetic_corpus(a.spec, a.out);
  const auto& s = a.spec;
  json m{{"spec_version", kSpecVersion},
         {"command", "make-corpus"},
         {"corpus",
          {{"num_utterances", s.num_utterances},
           {"length", s.length},
           {"sample_rate", s.sample_rate},
           {"frequencies", s.frequencies},
           {"amplitude_min", s.amplitude_min},
           {"amplitude_max", s.amplitude_max},
           {"noise_floor", s.noise_floor},
           {"chord_probability", s.chord_probability},
           {"random_phase", s.random_phase},
           {"fade", s.fade},
           {"seed", s.seed}}}};
  write_json(fs::path(a.out) / "corpus.json", m);
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Tapes allocate and free many mid-sized buffers per step; keep them in the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
  CLI::App app{"DiffWave diffusion vocoder: training, sampling and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_flag("--strict", g.strict, "Treat warnings as errors (exit 5)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Fit a model; writes checkpoint, loss curve and manifest");
  add_config_options(t, train.cfg);
  t->add_flag("--resume", train.resume, "Continue from the checkpoint if it exists");

  SampleArgs smp, fsmp;
  for (auto [sa, name, help] : {std::tuple{&smp, "sample", "Full T-step reverse process"},
                                std::tuple{&fsmp, "fast-sample", "Reverse process over the fast schedule"}}) {
    auto* s = app.add_subcommand(name, help);
    add_model_options(s, sa->model);
    s->add_option("-n,--n", sa->n, "Number of samples");
    s->add_option("--length", sa->length, "Samples per waveform");
    s->add_option("--batch", sa->batch, "Waveforms per forward pass");
    s->add_option("--out", sa->out, "Output directory")->required();
    s->add_option("--condition", sa->model.condition, "Directory of WAVs whose mels condition the samples");
    s->add_flag("--final-step-noise", sa->final_noise, "Add noise on the last reverse step too");
    if (sa == &fsmp) s->add_option("--etas", sa->etas, "Fast schedule noise levels");
  }

  DenoiseArgs den;
  auto* d = app.add_subcommand("denoise", "Reverse a noisy WAV from an intermediate step");
  add_model_options(d, den.model);
  d->add_option("--input", den.input, "Noisy WAV")->required();
  d->add_option("--output", den.output, "Output WAV")->required();
  d->add_option("--t-start", den.t_start, "Step the input is treated as");
  d->add_option("--condition", den.model.condition, "WAV whose mel conditions the model (default: the input)");

  InterpolateArgs itp;
  auto* ip = app.add_subcommand("interpolate", "Mix two WAVs in latent space at t_mix and reverse");
  add_model_options(ip, itp.model);
  ip->add_option("--a", itp.a, "First WAV")->required();
  ip->add_option("--b", itp.b, "Second WAV")->required();
  ip->add_option("--lambdas", itp.lambdas, "Mixing weights in [0, 1]");
  ip->add_option("--t-mix", itp.t_mix, "Mixing step");
  ip->add_option("--out", itp.out, "Output directory")->required();
  ip->add_flag("--correlated", itp.correlated, "Share the forward noise between endpoints");
  ip->add_option("--condition", itp.model.condition, "WAV whose mel conditions the model");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score generated WAVs against a reference set");
  e->add_option("--generated", ev.generated, "Directory of generated WAVs")->required();
  e->add_option("--reference", ev.reference, "Directory of reference WAVs (labels via manifest.tsv)")->required();
  e->add_option("--classifier", ev.classifier, "Trained feature classifier");
  e->add_option("--save-classifier", ev.save_classifier, "Where to store a classifier trained here");
  e->add_option("--classifier-epochs", ev.epochs, "Epochs when training the classifier");
  e->add_option("--ndb-bins", ev.ndb_bins, "K-means bins for NDB");
  e->add_option("--seed", ev.seed, "Seed for classifier training and K-means");
  e->add_option("--out", ev.out, "Report JSON (default: stdout)");

  InspectArgs ins;
  auto* is = app.add_subcommand("inspect-schedule", "Print the training or fast schedule as CSV");
  add_config_options(is, ins.cfg);
  is->add_option("--T", ins.T, "Diffusion steps");
  is->add_option("--beta-start", ins.beta_start, "beta_1");
  is->add_option("--beta-end", ins.beta_end, "beta_T");
  is->add_option("--etas", ins.etas, "Fast schedule noise levels");
  is->add_flag("--fast", ins.fast, "Print the fast schedule instead");
  is->add_option("--out", ins.out, "CSV file (default: stdout)");

  FieldArgs rf;
  auto* r = app.add_subcommand("receptive-field", "Print the receptive field of the configured network");
  add_config_options(r, rf.cfg);
  r->add_option("--layers", rf.layers, "Residual layers");
  r->add_option("--kernel", rf.kernel, "Kernel size");
  r->add_option("--cycle", rf.cycle, "Dilation cycle length");

  CorpusArgs mc;
  auto* m = app.add_subcommand("make-corpus", "Write the synthetic tone corpus");
  m->add_option("--out", mc.out, "Output directory")->required();
  m->add_option("-n,--n", mc.spec.num_utterances, "Utterances");
  m->add_option("--length", mc.spec.length, "Samples per utterance");
  m->add_option("--sample-rate", mc.spec.sample_rate, "Sample rate");
  m->add_option("--bins", mc.bins, "Tone frequencies as DFT bin indices");
  m->add_option("--frequencies", mc.spec.frequencies, "Tone frequencies in Hz");
  m->add_option("--amplitude-min", mc.spec.amplitude_min, "Smallest tone amplitude");
  m->add_option("--amplitude-max", mc.spec.amplitude_max, "Largest tone amplitude");
  m->add_option("--noise", mc.spec.noise_floor, "White-noise std");
  m->add_option("--chord-probability", mc.spec.chord_probability, "Chance of a second tone");
  m->add_option("--fade", mc.spec.fade, "Fade length in samples");
  m->add_flag("--fixed-phase", mc.fixed_phase, "Start every tone at phase 0");
  m->add_option("--seed", mc.spec.seed, "Corpus seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    std::cerr << "error: config: " << one_line(err.what()) << '\n';
    return exit_code(ErrorKind::Config);
  }

  try {
    if (*t) cmd_train(train, g);
    else if (app.got_subcommand("sample")) cmd_sample(smp, g, false);
    else if (app.got_subcommand("fast-sample")) cmd_sample(fsmp, g, true);
    else if (*d) cmd_denoise(den, g);
    else if (*ip) cmd_interpolate(itp, g);
    else if (*e) cmd_evaluate(ev, g);
    else if (*is) cmd_inspect(ins);
    else if (*r) cmd_receptive_field(rf);
    else if (*m) cmd_make_corpus(mc, g);
  } catch (const Error& err) {
    std::cerr << "error: " << to_string(err.kind()) << ": " << one_line(err.what()) << '\n';
    return exit_code(err.kind());
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: io: " << one_line(err.what()) << '\n';
    return exit_code(ErrorKind::Io);
  } catch (const std::exception& err) {
    std::cerr << "error: internal: " << one_line(err.what()) << '\n';
    return 1;
  }
  return 0;
}
