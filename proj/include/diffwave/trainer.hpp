#pragma once

// Training loop: per-example uniform steps, eps ~ N(0, I), squared-error
// loss on the noise, Adam updates, binary checkpoints, and a loss curve.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diffwave/audio.hpp"
#include "diffwave/autograd.hpp"
#include "diffwave/config.hpp"
#include "diffwave/error.hpp"
#include "diffwave/model.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/schedule.hpp"
#include "diffwave/serialize.hpp"

namespace diffwave {

template <class Real>
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  Adam() = default;
  explicit Adam(const ParamStore<Real>& params) { reset(params); }

  void reset(const ParamStore<Real>& params) {
    m_ = ParamStore<Real>();
    v_ = ParamStore<Real>();
    for (const auto& e : params.entries()) {
      m_.add(e.name, Tensor<Real>::zeros_like(e.value));
      v_.add(e.name, Tensor<Real>::zeros_like(e.value));
    }
    steps_ = 0;
  }

  /// One bias-corrected update from the gradients currently held in `params`.
  void step(ParamStore<Real>& params, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    for (auto& e : params.entries()) {
      auto& m = m_.value(e.name);
      auto& v = v_.value(e.name);
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = static_cast<double>(e.grad[i]);
        const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
        const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
        m[i] = static_cast<Real>(mi);
        v[i] = static_cast<Real>(vi);
        e.value[i] = static_cast<Real>(static_cast<double>(e.value[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
      }
    }
  }

  std::uint64_t steps() const noexcept { return steps_; }
  void set_steps(std::uint64_t s) noexcept { steps_ = s; }
  ParamStore<Real>& first_moments() noexcept { return m_; }
  ParamStore<Real>& second_moments() noexcept { return v_; }
  const ParamStore<Real>& first_moments() const noexcept { return m_; }
  const ParamStore<Real>& second_moments() const noexcept { return v_; }

 private:
  ParamStore<Real> m_, v_;
  std::uint64_t steps_ = 0;
};

/// Log-mel settings matching the model's 256x upsampler: hop 256, one band per model mel band.
inline MelConfig vocoder_mel_config(std::uint32_t sample_rate, std::size_t bands) {
  MelConfig m;
  m.sample_rate = sample_rate;
  m.hop = kUpsampleStride * kUpsampleStride;
  m.n_mels = bands;
  return m;
}

/// Utterances to crop from, plus whatever the conditioning mode needs.
struct TrainingSet {
  std::vector<std::vector<double>> clips;
  std::vector<int> labels;  // required for label conditioning
  MelConfig mel;            // used for mel conditioning

  static TrainingSet from_corpus(const std::vector<LabeledWave>& corpus) {
    TrainingSet s;
    for (const auto& u : corpus) {
      s.clips.push_back(u.wave.samples);
      s.labels.push_back(u.label);
    }
    if (!corpus.empty()) s.mel.sample_rate = corpus.front().wave.sample_rate;
    return s;
  }

  static TrainingSet from_corpus(const std::vector<LabeledWave>& corpus, const DiffWaveConfig& model) {
    auto s = from_corpus(corpus);
    s.mel = vocoder_mel_config(s.mel.sample_rate, model.mel_bands);
    return s;
  }
};

template <class Real>
struct Batch {
  Tensor<Real> x0;   // [B, 1, L]
  Tensor<Real> mel;  // [B, bands, F] when mel-conditioned
  std::vector<int> labels;

  Conditioner<Real> conditioner() const {
    Conditioner<Real> c;
    if (!mel.empty()) c.mel = &mel;
    c.labels = labels;
    return c;
  }
};

/// Log-mel of one waveform as [1, bands, F] rows ready for batching.
template <class Real>
Tensor<Real> mel_features(const std::vector<double>& x, const MelConfig& mc) {
  const auto m = mel_spectrogram(x, mc);
  Tensor<Real> out({1, mc.n_mels, m.frames()});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(m.values[i]);
  return out;
}

/// Stacks per-example [1, ...] tensors along the batch axis.
template <class Real>
Tensor<Real> stack(const std::vector<Tensor<Real>>& items) {
  require(!items.empty(), "stack: no items");
  Shape s = items.front().shape();
  const std::size_t n = items.front().size();
  s[0] = items.size();
  Tensor<Real> out(s);
  for (std::size_t b = 0; b < items.size(); ++b) {
    items.front().check_same(items[b], "stack");
    std::copy(items[b].vec().begin(), items[b].vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

/// Draws B utterances uniformly with replacement and random-crops each.
template <class Real>
Batch<Real> draw_batch(const TrainingSet& data, Conditioning mode, std::size_t B, std::size_t crop, Rng& rng) {
  require(!data.clips.empty(), "train: empty dataset");
  Batch<Real> batch;
  batch.x0 = Tensor<Real>({B, 1, crop});
  std::vector<Tensor<Real>> mels;
  for (std::size_t b = 0; b < B; ++b) {
    const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.clips.size() - 1)));
    const auto x = random_crop(data.clips[idx], crop, rng);
    for (std::size_t i = 0; i < crop; ++i) batch.x0[b * crop + i] = static_cast<Real>(x[i]);
    if (mode == Conditioning::Mel) mels.push_back(mel_features<Real>(x, data.mel));
    if (mode == Conditioning::Label) {
      require(idx < data.labels.size() && data.labels[idx] >= 0, "train: label conditioning needs a label per clip");
      batch.labels.push_back(data.labels[idx]);
    }
  }
  if (mode == Conditioning::Mel) batch.mel = stack(mels);
  return batch;
}

/// One optimization step; returns the batch loss before the update.
template <class Real>
double train_step(DiffWave<Real>& model, const VarianceSchedule& sched, Adam<Real>& adam, const Batch<Real>& batch,
                  Rng& rng, double lr) {
  require(sched.T() == model.config().T, "train: schedule T does not match model T");
  const std::size_t B = batch.x0.dim(0), L = batch.x0.dim(2);
  std::vector<double> steps(B);
  for (auto& t : steps) t = static_cast<double>(rng.uniform_int(1, static_cast<std::int64_t>(sched.T())));
  Tensor<Real> eps({B, 1, L});
  rng.fill_normal(eps.span());
  Tensor<Real> xt({B, 1, L});
  for (std::size_t b = 0; b < B; ++b) {
    const auto t = static_cast<std::size_t>(steps[b]);
    const double a = std::sqrt(sched.alpha_bar(t)), s = std::sqrt(1.0 - sched.alpha_bar(t));
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t j = b * L + i;
      xt[j] = static_cast<Real>(a * static_cast<double>(batch.x0[j]) + s * static_cast<double>(eps[j]));
    }
  }
  model.params().zero_grad();
  double loss;
  {
    Tape<Real> tape;
    auto l = ops::squared_error(model.forward(tape, xt, steps, batch.conditioner()), eps);
    loss = static_cast<double>(l.value()[0]);
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "train: non-finite loss; last steps t =";
      for (double t : steps) os << ' ' << t;
      os << "; schedule T=" << sched.T() << " beta_1=" << sched.beta(1) << " beta_T=" << sched.beta(sched.T())
         << " alpha_bar_T=" << sched.alpha_bar(sched.T());
      fail(ErrorKind::Numeric, os.str());
    }
    grad(l);
  }
  adam.step(model.params(), lr);
  return loss;
}

/// Everything a checkpoint holds.
template <class Real>
struct TrainState {
  RunConfig config;
  DiffWave<Real> model;
  Adam<Real> adam;
  Rng rng;
  std::uint64_t step = 0;

  /// Fresh state: parameters seeded from training.seed, the data/noise stream from a derived seed.
  static TrainState initial(const RunConfig& cfg) {
    cfg.validate();
    TrainState s{cfg, DiffWave<Real>(cfg.model, cfg.training.seed), {}, Rng::stream(cfg.training.seed, 1), 0};
    s.adam.reset(s.model.params());
    return s;
  }
};

inline constexpr char kCheckpointMagic[4] = {'D', 'F', 'W', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
std::vector<char> encode_checkpoint(const TrainState<Real>& s) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.pod(kCheckpointVersion);
  w.string(canonical_text(s.config));
  const auto& params = s.model.params().entries();
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) w.tensor(e.name, e.value);
  w.pod(static_cast<std::uint32_t>(2 * params.size()));
  for (const auto& e : s.adam.first_moments().entries()) w.tensor("adam.m." + e.name, e.value);
  for (const auto& e : s.adam.second_moments().entries()) w.tensor("adam.v." + e.name, e.value);
  w.string(s.rng.state());
  w.pod(static_cast<std::uint64_t>(s.step));
  return w.buffer();
}

template <class Real>
void save_checkpoint(const TrainState<Real>& s, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(s);
  write_file_atomic(path, bytes.data(), bytes.size());
}

namespace detail {

template <class Real>
void load_into(ParamStore<Real>& store, const std::string& name, Tensor<Real> t, const std::string& src) {
  if (!store.contains(name))
    fail(ErrorKind::Io, src + ": checkpoint tensor '" + name + "' does not exist in the configured model");
  auto& dst = store.value(name);
  if (dst.shape() != t.shape())
    fail(ErrorKind::Io, src + ": tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                            shape_str(dst.shape()));
  dst = std::move(t);
}

}  // namespace detail

template <class Real>
TrainState<Real> decode_checkpoint(std::vector<char> bytes, const std::string& src) {
  ByteReader r(std::move(bytes), src);
  char magic[4];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) fail(ErrorKind::Io, src + ": bad magic (not a checkpoint)");
  if (const auto v = r.pod<std::uint32_t>(); v != kCheckpointVersion)
    fail(ErrorKind::Io, src + ": unsupported checkpoint version " + std::to_string(v));
  TrainState<Real> s;
  s.config = parse_run_config(r.string());
  s.config.validate();
  s.model = DiffWave<Real>(s.config.model);
  s.adam.reset(s.model.params());

  const auto n = r.pod<std::uint32_t>();
  if (n != s.model.params().entries().size())
    fail(ErrorKind::Io, src + ": checkpoint holds " + std::to_string(n) + " tensors, model has " +
                            std::to_string(s.model.params().entries().size()));
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name;
    auto t = r.tensor<Real>(name);
    detail::load_into(s.model.params(), name, std::move(t), src);
  }
  const auto nm = r.pod<std::uint32_t>();
  if (nm != 2 * n) fail(ErrorKind::Io, src + ": optimizer moment count mismatch");
  for (std::uint32_t i = 0; i < nm; ++i) {
    std::string name;
    auto t = r.tensor<Real>(name);
    if (name.rfind("adam.m.", 0) == 0) detail::load_into(s.adam.first_moments(), name.substr(7), std::move(t), src);
    else if (name.rfind("adam.v.", 0) == 0) detail::load_into(s.adam.second_moments(), name.substr(7), std::move(t), src);
    else fail(ErrorKind::Io, src + ": unexpected optimizer tensor '" + name + "'");
  }
  s.rng.set_state(r.string());
  s.step = r.pod<std::uint64_t>();
  s.adam.set_steps(s.step);
  if (r.remaining()) fail(ErrorKind::Io, src + ": trailing bytes after step counter");
  return s;
}

/// The run configuration stored in a checkpoint, read without decoding any tensors.
inline RunConfig peek_checkpoint_config(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  char magic[4];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) fail(ErrorKind::Io, path.string() + ": bad magic (not a checkpoint)");
  if (const auto v = r.pod<std::uint32_t>(); v != kCheckpointVersion)
    fail(ErrorKind::Io, path.string() + ": unsupported checkpoint version " + std::to_string(v));
  return parse_run_config(r.string());
}

template <class Real>
TrainState<Real> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<Real>(read_file(path), path.string());
}

struct LossRecord {
  std::uint64_t step;
  double loss;
};

inline std::string format_loss_curve(const std::vector<LossRecord>& curve) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& r : curve) os << r.step << '\t' << r.loss << '\n';
  return os.str();
}

inline std::vector<LossRecord> read_loss_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open loss curve '" + path.string() + "'");
  std::vector<LossRecord> out;
  LossRecord r;
  while (in >> r.step >> r.loss) out.push_back(r);
  return out;
}

struct FitOptions {
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const LossRecord&)> on_step;
};

/// Runs train_step until state.step reaches training.max_steps, checkpointing every
/// checkpoint_interval steps and at the end. Returns the losses of the steps taken here.
template <class Real>
std::vector<LossRecord> fit(const TrainingSet& data, TrainState<Real>& state, const FitOptions& opt = {}) {
  const auto& tc = state.config.training;
  const auto sched = state.config.build_schedule();
  require(!data.clips.empty(), "train: empty dataset");
  std::vector<LossRecord> curve;
  while (state.step < tc.max_steps) {
    const auto batch = draw_batch<Real>(data, state.config.model.conditioning, tc.batch_size, tc.crop_length, state.rng);
    const double loss = train_step(state.model, sched, state.adam, batch, state.rng, tc.learning_rate);
    ++state.step;
    curve.push_back({state.step, loss});
    if (opt.on_step) opt.on_step(curve.back());
    if (opt.checkpoint_path && tc.checkpoint_interval && state.step % tc.checkpoint_interval == 0)
      save_checkpoint(state, *opt.checkpoint_path);
  }
  if (opt.checkpoint_path) save_checkpoint(state, *opt.checkpoint_path);
  return curve;
}

}  // namespace diffwave
