#pragma once

// Declarative run configuration and its canonical JSON text form
// (sorted keys, two-space indent, trailing newline).

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffwave/error.hpp"
#include "diffwave/model.hpp"
#include "diffwave/schedule.hpp"

namespace diffwave {

inline constexpr const char* kSpecVersion = "1.0";

enum class Precision { Float32, Float64 };

inline std::string to_string(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "float32") return Precision::Float32;
  if (s == "float64") return Precision::Float64;
  fail(ErrorKind::Config, "unknown precision '" + s + "' (expected float32|float64)");
}

struct ScheduleConfig {
  std::string type = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.05;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t batch_size = 16;
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
  std::size_t crop_length = 16000;
  std::size_t checkpoint_interval = 0;  // 0 saves only at the end
  Precision precision = Precision::Float32;

  void validate() const {
    require(learning_rate >= 0.0, "training: learning_rate must be >= 0");
    require(batch_size >= 1, "training: batch_size must be >= 1");
    require(crop_length >= 1, "training: crop_length must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct PathsConfig {
  std::string data_dir;
  std::string output_dir;
  std::string checkpoint;

  friend bool operator==(const PathsConfig&, const PathsConfig&) = default;
};

struct RunConfig {
  DiffWaveConfig model;
  ScheduleConfig schedule;
  std::vector<double> fast_etas;  // empty selects the shipped default for model.T
  TrainConfig training;
  std::uint32_t sample_rate = 22050;
  PathsConfig paths;

  void validate() const {
    model.validate();
    training.validate();
    require(schedule.type == "linear", "schedule: unsupported type '" + schedule.type + "' (only linear)");
    require(sample_rate > 0, "audio: sample_rate must be positive");
    build_schedule();
  }

  VarianceSchedule build_schedule() const {
    return build_linear_schedule(model.T, schedule.beta_start, schedule.beta_end);
  }

  std::vector<double> etas() const {
    if (!fast_etas.empty()) return fast_etas;
    if (model.T <= 50) return {0.0001, 0.001, 0.01, 0.05, 0.2, 0.5};
    return {0.0001, 0.001, 0.01, 0.05, 0.2, 0.7};
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

using nlohmann::json;

/// Reads obj[key] into out when present; rejects keys the block does not define.
class BlockReader {
 public:
  BlockReader(const json& obj, std::string block) : obj_(obj), block_(std::move(block)) {
    if (!obj_.is_object()) fail(ErrorKind::Config, "config: block '" + block_ + "' must be an object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, "config: bad value for " + block_ + "." + key + ": " + e.what());
    }
  }
  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        fail(ErrorKind::Config, "config: unknown key " + block_ + "." + it.key());
  }

 private:
  const json& obj_;
  std::string block_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = {{"layers", c.model.n_layers},
                {"channels", c.model.residual_channels},
                {"kernel", c.model.kernel_size},
                {"dilation_cycle_length", c.model.dilation_cycle_length},
                {"T", c.model.T},
                {"conditioning", to_string(c.model.conditioning)},
                {"mel_bands", c.model.mel_bands},
                {"label_count", c.model.label_count},
                {"d_label", c.model.d_label}};
  j["schedule"] = {{"type", c.schedule.type}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["fast"] = {{"etas", c.fast_etas}};
  j["training"] = {{"lr", c.training.learning_rate},
                   {"batch", c.training.batch_size},
                   {"steps", c.training.max_steps},
                   {"seed", c.training.seed},
                   {"crop", c.training.crop_length},
                   {"checkpoint_interval", c.training.checkpoint_interval},
                   {"precision", to_string(c.training.precision)}};
  j["audio"] = {{"sample_rate", c.sample_rate}};
  j["paths"] = {{"data_dir", c.paths.data_dir}, {"output_dir", c.paths.output_dir}, {"checkpoint", c.paths.checkpoint}};
  return j;
}

/// Missing keys keep their defaults; unknown keys are errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::BlockReader top(j, "config");
  nlohmann::json model = nlohmann::json::object(), schedule = model, fast = model, training = model, audio = model,
                 paths = model;
  top.get("model", model);
  top.get("schedule", schedule);
  top.get("fast", fast);
  top.get("training", training);
  top.get("audio", audio);
  top.get("paths", paths);
  top.finish();

  detail::BlockReader m(model, "model");
  std::string cond = to_string(c.model.conditioning);
  m.get("layers", c.model.n_layers);
  m.get("channels", c.model.residual_channels);
  m.get("kernel", c.model.kernel_size);
  m.get("dilation_cycle_length", c.model.dilation_cycle_length);
  m.get("T", c.model.T);
  m.get("conditioning", cond);
  m.get("mel_bands", c.model.mel_bands);
  m.get("label_count", c.model.label_count);
  m.get("d_label", c.model.d_label);
  m.finish();
  c.model.conditioning = conditioning_from_string(cond);

  detail::BlockReader s(schedule, "schedule");
  s.get("type", c.schedule.type);
  s.get("beta_start", c.schedule.beta_start);
  s.get("beta_end", c.schedule.beta_end);
  s.finish();

  detail::BlockReader f(fast, "fast");
  f.get("etas", c.fast_etas);
  f.finish();

  detail::BlockReader t(training, "training");
  std::string precision = to_string(c.training.precision);
  t.get("lr", c.training.learning_rate);
  t.get("batch", c.training.batch_size);
  t.get("steps", c.training.max_steps);
  t.get("seed", c.training.seed);
  t.get("crop", c.training.crop_length);
  t.get("checkpoint_interval", c.training.checkpoint_interval);
  t.get("precision", precision);
  t.finish();
  c.training.precision = precision_from_string(precision);

  detail::BlockReader a(audio, "audio");
  a.get("sample_rate", c.sample_rate);
  a.finish();

  detail::BlockReader p(paths, "paths");
  p.get("data_dir", c.paths.data_dir);
  p.get("output_dir", c.paths.output_dir);
  p.get("checkpoint", c.paths.checkpoint);
  p.finish();
  return c;
}

inline std::string canonical_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Config, std::string("config: JSON parse error: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace diffwave
