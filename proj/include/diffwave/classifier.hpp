#pragma once

// Small trainable tone classifier used as the desk-scale feature extractor:
// time-averaged log-mel -> standardize -> FC -> ReLU (features) -> FC -> softmax.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "diffwave/audio.hpp"
#include "diffwave/autograd.hpp"
#include "diffwave/metrics.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/serialize.hpp"
#include "diffwave/trainer.hpp"

namespace diffwave {

/// Short-window log-mel front end suited to the 4 kHz tone corpus.
inline MelConfig classifier_mel_config(std::uint32_t sample_rate) {
  MelConfig m;
  m.sample_rate = sample_rate;
  m.n_fft = 256;
  m.window = 256;
  m.hop = 64;
  m.n_mels = 40;
  return m;
}

struct ClassifierConfig {
  std::size_t num_classes = 10;
  std::size_t hidden = 64;  // feature dimension
  MelConfig mel;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

class ToneClassifier : public FeatureExtractor {
 public:
  ToneClassifier() = default;

  explicit ToneClassifier(ClassifierConfig cfg) : cfg_(std::move(cfg)) {
    require(cfg_.num_classes >= 1 && cfg_.hidden >= 1, "classifier: num_classes and hidden must be >= 1");
    Rng rng(cfg_.seed);
    const std::size_t in = cfg_.mel.n_mels;
    auto uniform = [&](Shape s, std::size_t fan_in) {
      Tensor<double> t(std::move(s));
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.vec()) v = (2.0 * rng.uniform() - 1.0) * bound;
      return t;
    };
    params_.add("fc1.weight", uniform({cfg_.hidden, in}, in));
    params_.add("fc1.bias", Tensor<double>({cfg_.hidden}));
    params_.add("fc2.weight", uniform({cfg_.num_classes, cfg_.hidden}, cfg_.hidden));
    params_.add("fc2.bias", Tensor<double>({cfg_.num_classes}));
    norm_mean_.assign(in, 0.0);
    norm_std_.assign(in, 1.0);
  }

  std::size_t feature_dim() const override { return cfg_.hidden; }
  std::size_t num_classes() const override { return cfg_.num_classes; }
  const ClassifierConfig& config() const noexcept { return cfg_; }

  /// Time-averaged log-mel energies.
  std::vector<double> input_features(const std::vector<double>& wave) const {
    const auto m = mel_spectrogram(wave, cfg_.mel);
    std::vector<double> f(cfg_.mel.n_mels, 0.0);
    for (std::size_t b = 0; b < f.size(); ++b) {
      for (std::size_t t = 0; t < m.frames(); ++t) f[b] += m.values.at(b, t);
      f[b] /= static_cast<double>(m.frames());
    }
    return f;
  }

  /// Minibatch Adam on cross-entropy; returns the final-epoch mean loss.
  double train(const std::vector<std::vector<double>>& waves, const std::vector<int>& labels) {
    require(!waves.empty() && waves.size() == labels.size(), "classifier: need one label per training waveform");
    const std::size_t n = waves.size(), D = cfg_.mel.n_mels;
    std::vector<std::vector<double>> x;
    for (const auto& w : waves) x.push_back(input_features(w));
    for (std::size_t d = 0; d < D; ++d) {
      double m = 0, s = 0;
      for (const auto& r : x) m += r[d];
      m /= static_cast<double>(n);
      for (const auto& r : x) s += (r[d] - m) * (r[d] - m);
      norm_mean_[d] = m;
      norm_std_[d] = std::max(std::sqrt(s / static_cast<double>(n)), 1e-6);
    }
    Adam<double> adam(params_);
    Rng rng(Rng::stream(cfg_.seed, 1));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double epoch_loss = 0;
    for (std::size_t e = 0; e < cfg_.epochs; ++e) {
      for (std::size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
      epoch_loss = 0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < n; start += cfg_.batch_size) {
        const std::size_t B = std::min(cfg_.batch_size, n - start);
        Tensor<double> in({B, D});
        std::vector<int> y(B);
        for (std::size_t b = 0; b < B; ++b) {
          const auto& r = x[order[start + b]];
          for (std::size_t d = 0; d < D; ++d) in.at(b, d) = (r[d] - norm_mean_[d]) / norm_std_[d];
          y[b] = labels[order[start + b]];
        }
        params_.zero_grad();
        Tape<double> tape;
        auto loss = ops::cross_entropy(logits(tape, tape.constant(std::move(in))), y);
        epoch_loss += loss.value()[0];
        ++batches;
        grad(loss);
        adam.step(params_, cfg_.learning_rate);
      }
      epoch_loss /= static_cast<double>(batches);
    }
    return epoch_loss;
  }

  ExtractedFeatures extract(const std::vector<double>& wave) const override {
    const auto f = input_features(wave);
    Tensor<double> in({1, f.size()});
    for (std::size_t d = 0; d < f.size(); ++d) in[d] = (f[d] - norm_mean_[d]) / norm_std_[d];
    Tape<double> tape(false);
    Var<double> hidden;
    auto out = ops::softmax(logits(tape, tape.constant(std::move(in)), &hidden));
    return {hidden.value().vec(), out.value().vec()};
  }

  void save(const std::filesystem::path& path) const {
    std::map<std::string, Tensor<double>> t;
    for (const auto& e : params_.entries()) t.emplace(e.name, e.value);
    t.emplace("norm.mean", Tensor<double>({norm_mean_.size()}, norm_mean_));
    t.emplace("norm.std", Tensor<double>({norm_std_.size()}, norm_std_));
    t.emplace("meta", Tensor<double>({6}, {static_cast<double>(cfg_.num_classes), static_cast<double>(cfg_.hidden),
                                           static_cast<double>(cfg_.mel.sample_rate), static_cast<double>(cfg_.mel.n_fft),
                                           static_cast<double>(cfg_.mel.hop), static_cast<double>(cfg_.mel.window)}));
    save_tensor_bundle(path, t);
  }

  /// Frame geometry comes from the file; the remaining mel settings from `mel`.
  static ToneClassifier load(const std::filesystem::path& path, MelConfig mel = {}) {
    auto t = load_tensor_bundle<double>(path);
    auto take = [&](const std::string& name) -> Tensor<double>& {
      const auto it = t.find(name);
      if (it == t.end()) fail(ErrorKind::Io, path.string() + ": classifier file lacks '" + name + "'");
      return it->second;
    };
    const auto& meta = take("meta");
    if (meta.size() != 6) fail(ErrorKind::Io, path.string() + ": bad classifier metadata");
    ClassifierConfig cfg;
    cfg.num_classes = static_cast<std::size_t>(meta[0]);
    cfg.hidden = static_cast<std::size_t>(meta[1]);
    cfg.mel = mel;
    cfg.mel.sample_rate = static_cast<std::uint32_t>(meta[2]);
    cfg.mel.n_fft = static_cast<std::size_t>(meta[3]);
    cfg.mel.hop = static_cast<std::size_t>(meta[4]);
    cfg.mel.window = static_cast<std::size_t>(meta[5]);
    cfg.mel.n_mels = take("norm.mean").size();
    ToneClassifier c(cfg);
    for (auto& e : c.params_.entries()) {
      auto& v = take(e.name);
      if (v.shape() != e.value.shape()) fail(ErrorKind::Io, path.string() + ": shape mismatch for '" + e.name + "'");
      e.value = v;
    }
    c.norm_mean_ = take("norm.mean").vec();
    c.norm_std_ = take("norm.std").vec();
    return c;
  }

 private:
  Var<double> logits(Tape<double>& tape, Var<double> x, Var<double>* hidden = nullptr) const {
    auto w1 = tape.param(params_, "fc1.weight"), b1 = tape.param(params_, "fc1.bias");
    auto h = ops::relu(ops::affine(x, w1, &b1));
    if (hidden) *hidden = h;
    auto w2 = tape.param(params_, "fc2.weight"), b2 = tape.param(params_, "fc2.bias");
    return ops::affine(h, w2, &b2);
  }

  ClassifierConfig cfg_;
  mutable ParamStore<double> params_;  // tapes take non-const handles even when not recording
  std::vector<double> norm_mean_, norm_std_;
};

}  // namespace diffwave
