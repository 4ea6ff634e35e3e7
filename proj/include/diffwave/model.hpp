#pragma once

// The epsilon-prediction network: a stack of residual layers built around
// bidirectional dilated convolutions, conditioned on the diffusion step and
// optionally on an upsampled mel spectrogram or a global discrete label.
//
//   x [B,1,L] -> 1x1 conv (1->C) -> ReLU -> N residual layers -> skip sum / sqrt(N)
//             -> ReLU -> 1x1 (C->C) -> ReLU -> 1x1 (C->1) -> eps [B,1,L]
//
// Each residual layer adds its step feature over length, applies the dilated
// conv (C->2C), adds the conditioner bias, gates with tanh*sigmoid, and emits
// a residual (1x1, merged as (x + r)/sqrt(2)) and a skip (1x1).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffwave/autograd.hpp"
#include "diffwave/error.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

inline constexpr std::size_t kStepEmbeddingDim = 128;
inline constexpr std::size_t kStepHiddenDim = 512;
inline constexpr std::size_t kUpsampleStride = 16;   // per layer; two layers give 256
inline constexpr std::size_t kUpsampleKernelTime = 32;
inline constexpr std::size_t kUpsampleKernelFreq = 3;
inline constexpr double kUpsampleLeakySlope = 0.4;

enum class Conditioning { None, Mel, Label };

inline std::string to_string(Conditioning c) {
  switch (c) {
    case Conditioning::None: return "none";
    case Conditioning::Mel: return "mel";
    case Conditioning::Label: return "label";
  }
  return "none";
}

inline Conditioning conditioning_from_string(const std::string& s) {
  if (s == "none") return Conditioning::None;
  if (s == "mel") return Conditioning::Mel;
  if (s == "label") return Conditioning::Label;
  fail(ErrorKind::Config, "unknown conditioning mode '" + s + "' (expected none|mel|label)");
}

struct DiffWaveConfig {
  std::size_t n_layers = 30;
  std::size_t residual_channels = 64;
  std::size_t kernel_size = 3;
  std::size_t dilation_cycle_length = 10;
  std::size_t T = 50;
  Conditioning conditioning = Conditioning::None;
  std::size_t mel_bands = 80;
  std::size_t label_count = 10;
  std::size_t d_label = 128;

  void validate() const {
    require(n_layers >= 1, "model: n_layers must be >= 1");
    require(residual_channels >= 1, "model: residual_channels must be >= 1");
    require(kernel_size % 2 == 1, "model: kernel_size must be odd");
    require(dilation_cycle_length >= 1 && n_layers % dilation_cycle_length == 0,
            "model: n_layers must be a multiple of dilation_cycle_length");
    require(dilation_cycle_length < 63, "model: dilation_cycle_length too large");
    require(T >= 1, "model: T must be >= 1");
    if (conditioning == Conditioning::Mel) require(mel_bands >= 1, "model: mel_bands must be >= 1");
    if (conditioning == Conditioning::Label)
      require(label_count >= 1 && d_label >= 1, "model: label_count and d_label must be >= 1");
  }

  std::size_t dilation(std::size_t layer) const { return std::size_t{1} << (layer % dilation_cycle_length); }

  friend bool operator==(const DiffWaveConfig&, const DiffWaveConfig&) = default;
};

/// r = (k - 1) * sum_i d_i + 1 over every residual layer.
inline std::size_t receptive_field(const DiffWaveConfig& cfg) {
  std::size_t sum = 0;
  for (std::size_t i = 0; i < cfg.n_layers; ++i) sum += cfg.dilation(i);
  return (cfg.kernel_size - 1) * sum + 1;
}

/// Sinusoidal encoding: [sin(10^(4j/63) t) for j < 64, cos(10^(4j/63) t) for j < 64].
inline std::array<double, kStepEmbeddingDim> step_embedding(double t) {
  std::array<double, kStepEmbeddingDim> e{};
  constexpr std::size_t half = kStepEmbeddingDim / 2;
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::pow(10.0, 4.0 * static_cast<double>(j) / 63.0);
    e[j] = std::sin(freq * t);
    e[half + j] = std::cos(freq * t);
  }
  return e;
}

template <class Real>
struct Conditioner {
  const Tensor<Real>* mel = nullptr;  // [B, mel_bands, F], upsampled inside the model
  std::vector<int> labels;            // one per batch element
};

template <class Real>
class DiffWave {
 public:
  DiffWave() = default;

  explicit DiffWave(DiffWaveConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    init(rng);
  }

  const DiffWaveConfig& config() const noexcept { return cfg_; }
  ParamStore<Real>& params() noexcept { return params_; }
  const ParamStore<Real>& params() const noexcept { return params_; }

  static std::string layer_name(std::size_t i, const char* part) {
    return "layers." + std::to_string(i) + "." + part;
  }

  /// Shared step MLP followed by the layer-specific projection; one [B, C] feature per layer.
  std::vector<Var<Real>> step_features(Tape<Real>& tape, const std::vector<double>& steps) {
    const std::size_t B = steps.size();
    Tensor<Real> emb({B, kStepEmbeddingDim});
    for (std::size_t b = 0; b < B; ++b) {
      const auto e = step_embedding(steps[b]);
      for (std::size_t j = 0; j < kStepEmbeddingDim; ++j) emb[b * kStepEmbeddingDim + j] = static_cast<Real>(e[j]);
    }
    auto h = tape.constant(std::move(emb));
    auto w1 = tape.param(params_, "step.fc1.weight"), b1 = tape.param(params_, "step.fc1.bias");
    h = ops::silu(ops::affine(h, w1, &b1));
    auto w2 = tape.param(params_, "step.fc2.weight"), b2 = tape.param(params_, "step.fc2.bias");
    h = ops::silu(ops::affine(h, w2, &b2));
    std::vector<Var<Real>> out;
    out.reserve(cfg_.n_layers);
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      auto w = tape.param(params_, layer_name(i, "step.weight"));
      auto b = tape.param(params_, layer_name(i, "step.bias"));
      out.push_back(ops::affine(h, w, &b));
    }
    return out;
  }

  /// [B, bands, F] -> [B, bands, 256 F] through two stride-16 transposed convs with leaky ReLU.
  Var<Real> upsample_mel(Var<Real> mel) {
    Tape<Real>& tape = *mel.tape;
    const auto& s = mel.shape();
    require(s.size() == 3 && s[2] >= 1, "upsample_mel: expected [B, bands, F] with F >= 1");
    auto x = ops::reshape(mel, {s[0], 1, s[1], s[2]});
    const ops::ConvTranspose2dGeometry geo{1, kUpsampleStride, kUpsampleKernelFreq / 2,
                                           (kUpsampleKernelTime - kUpsampleStride) / 2};
    for (const char* layer : {"mel.up1", "mel.up2"}) {
      auto w = tape.param(params_, std::string(layer) + ".weight");
      auto b = tape.param(params_, std::string(layer) + ".bias");
      x = ops::leaky_relu(ops::conv_transpose2d(x, w, &b, geo), static_cast<Real>(kUpsampleLeakySlope));
    }
    const auto& o = x.shape();
    return ops::reshape(x, {o[0], o[2], o[3]});
  }

  /// Label-embedding lookup, [B, d_label].
  Var<Real> embed_label(Tape<Real>& tape, const std::vector<int>& labels) {
    require(cfg_.conditioning == Conditioning::Label, "embed_label: model is not label-conditioned");
    return ops::embedding(tape.param(params_, "label.embedding"), labels);
  }

  /// eps_theta(x_t, t) for x_t [B, 1, L]; `steps` holds one (possibly fractional) step per example,
  /// or a single step shared by the batch.
  Var<Real> forward(Tape<Real>& tape, const Tensor<Real>& xt, std::vector<double> steps,
                    const Conditioner<Real>& cond = {}) {
    return forward(tape, tape.constant(xt), std::move(steps), cond);
  }

  /// Same, with the input already on the tape (e.g. to differentiate with respect to it).
  Var<Real> forward(Tape<Real>& tape, Var<Real> xt, std::vector<double> steps, const Conditioner<Real>& cond = {}) {
    const Shape xs = xt.shape();
    require(xs.size() == 3 && xs[1] == 1, "epsilon_theta: expected input [B,1,L], got " + shape_str(xs));
    const std::size_t B = xs[0], L = xs[2];
    if (steps.size() == 1 && B > 1) steps.assign(B, steps[0]);
    require(steps.size() == B, "epsilon_theta: need one diffusion step per batch element");

    Var<Real> cond_local{};
    Var<Real> label_emb{};
    switch (cfg_.conditioning) {
      case Conditioning::None:
        require(cond.mel == nullptr && cond.labels.empty(), "epsilon_theta: unconditional model given a conditioner");
        break;
      case Conditioning::Mel: {
        require(cond.mel != nullptr, "epsilon_theta: mel-conditioned model needs a mel spectrogram");
        const auto& m = *cond.mel;
        require(m.rank() == 3 && m.dim(0) == B && m.dim(1) == cfg_.mel_bands,
                "epsilon_theta: mel conditioner shape " + shape_str(m.shape()) + " does not match batch/bands");
        auto up = upsample_mel(tape.constant(m));
        if (up.shape()[2] < L)
          fail(ErrorKind::Config, "epsilon_theta: upsampled mel length " + std::to_string(up.shape()[2]) +
                                      " shorter than waveform length " + std::to_string(L));
        cond_local = ops::trim_length(up, L);
        break;
      }
      case Conditioning::Label:
        require(cond.labels.size() == B, "epsilon_theta: label-conditioned model needs one label per example");
        label_emb = embed_label(tape, cond.labels);
        break;
    }

    auto p = [&](const std::string& n) { return tape.param(params_, n); };
    auto conv = [&](Var<Real> x, const std::string& prefix, std::size_t dilation) {
      auto w = p(prefix + ".weight");
      auto b = p(prefix + ".bias");
      return ops::conv1d(x, w, &b, dilation);
    };

    auto h = ops::relu(conv(xt, "input", 1));
    const auto feats = step_features(tape, steps);
    const Real inv_sqrt2 = static_cast<Real>(1.0 / std::sqrt(2.0));
    Var<Real> skip{};
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      auto y = ops::add_over_length(h, feats[i]);
      y = conv(y, layer_name(i, "dilated"), cfg_.dilation(i));
      if (cfg_.conditioning == Conditioning::Mel) {
        y = ops::add(y, conv(cond_local, layer_name(i, "cond"), 1));
      } else if (cfg_.conditioning == Conditioning::Label) {
        auto w = p(layer_name(i, "cond.weight"));
        auto b = p(layer_name(i, "cond.bias"));
        y = ops::add_over_length(y, ops::affine(label_emb, w, &b));
      }
      auto g = ops::gated_tanh(y);
      auto r = conv(g, layer_name(i, "residual"), 1);
      auto s = conv(g, layer_name(i, "skip"), 1);
      h = ops::scale(ops::add(h, r), inv_sqrt2);
      skip = i == 0 ? s : ops::add(skip, s);
    }
    auto out = ops::scale(skip, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(cfg_.n_layers))));
    out = ops::relu(conv(ops::relu(out), "head.hidden", 1));
    return conv(out, "head.out", 1);
  }

  /// Inference-mode forward at a single step for the whole batch.
  Tensor<Real> predict(const Tensor<Real>& xt, double t, const Conditioner<Real>& cond = {}) {
    Tape<Real> tape(false);
    return forward(tape, xt, {t}, cond).value();
  }

  std::size_t num_params() const { return params_.num_scalars(); }

 private:
  void add_uniform(Rng& rng, const std::string& name, Shape shape, std::size_t fan_in) {
    Tensor<Real> w(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w.vec()) v = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
    params_.add(name, std::move(w));
  }
  void add_zeros(const std::string& name, Shape shape) { params_.add(name, Tensor<Real>(std::move(shape))); }

  void init(Rng& rng) {
    const std::size_t C = cfg_.residual_channels, k = cfg_.kernel_size;
    add_uniform(rng, "input.weight", {C, 1, 1}, 1);
    add_zeros("input.bias", {C});
    add_uniform(rng, "step.fc1.weight", {kStepHiddenDim, kStepEmbeddingDim}, kStepEmbeddingDim);
    add_zeros("step.fc1.bias", {kStepHiddenDim});
    add_uniform(rng, "step.fc2.weight", {kStepHiddenDim, kStepHiddenDim}, kStepHiddenDim);
    add_zeros("step.fc2.bias", {kStepHiddenDim});
    if (cfg_.conditioning == Conditioning::Mel) {
      // Taps reaching one output of a stride-s transposed conv: kf * kt / s.
      const std::size_t fan = kUpsampleKernelFreq * kUpsampleKernelTime / kUpsampleStride;
      for (const char* layer : {"mel.up1", "mel.up2"}) {
        add_uniform(rng, std::string(layer) + ".weight", {1, 1, kUpsampleKernelFreq, kUpsampleKernelTime}, fan);
        add_zeros(std::string(layer) + ".bias", {1});
      }
    } else if (cfg_.conditioning == Conditioning::Label) {
      Tensor<Real> table({cfg_.label_count, cfg_.d_label});
      for (auto& v : table.vec()) v = static_cast<Real>(rng.normal());
      params_.add("label.embedding", std::move(table));
    }
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      add_uniform(rng, layer_name(i, "step.weight"), {C, kStepHiddenDim}, kStepHiddenDim);
      add_zeros(layer_name(i, "step.bias"), {C});
      add_uniform(rng, layer_name(i, "dilated.weight"), {2 * C, C, k}, C * k);
      add_zeros(layer_name(i, "dilated.bias"), {2 * C});
      if (cfg_.conditioning == Conditioning::Mel) {
        add_uniform(rng, layer_name(i, "cond.weight"), {2 * C, cfg_.mel_bands, 1}, cfg_.mel_bands);
        add_zeros(layer_name(i, "cond.bias"), {2 * C});
      } else if (cfg_.conditioning == Conditioning::Label) {
        add_uniform(rng, layer_name(i, "cond.weight"), {2 * C, cfg_.d_label}, cfg_.d_label);
        add_zeros(layer_name(i, "cond.bias"), {2 * C});
      }
      add_uniform(rng, layer_name(i, "residual.weight"), {C, C, 1}, C);
      add_zeros(layer_name(i, "residual.bias"), {C});
      add_uniform(rng, layer_name(i, "skip.weight"), {C, C, 1}, C);
      add_zeros(layer_name(i, "skip.bias"), {C});
    }
    add_uniform(rng, "head.hidden.weight", {C, C, 1}, C);
    add_zeros("head.hidden.bias", {C});
    // Zero output projection: eps_theta == 0 before the first update.
    add_zeros("head.out.weight", {1, C, 1});
    add_zeros("head.out.bias", {1});
  }

  DiffWaveConfig cfg_;
  ParamStore<Real> params_;
};

}  // namespace diffwave
