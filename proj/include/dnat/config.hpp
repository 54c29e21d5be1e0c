#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>

#include <json.hpp>

#include "dnat/error.hpp"
#include "dnat/model.hpp"
#include "dnat/schedule.hpp"

namespace dnat {

using json = nlohmann::json;

/// Hyperparameters of the diffusion training loop. Defaults are the
/// full-scale settings; toy presets override batch size, steps and lr.
struct TrainConfig {
  int diffusion_steps = 1000;
  ScheduleKind schedule = ScheduleKind::linear;
  double uniform_noise = 0.0;
  int batch_size = 512;
  long total_steps = 80000;
  double lr = 5e-5;
  double weight_decay = 0.01;
  double self_prompt_prob = 0.5;
  std::uint64_t seed = 0;
  bool loss_on_masked_only = false;
  long checkpoint_every = 0;

  void validate() const {
    if (diffusion_steps < 1) throw Error("train.diffusion_steps must be >= 1");
    if (batch_size < 1) throw Error("train.batch_size must be >= 1");
    if (total_steps < 0) throw Error("train.total_steps must be >= 0");
    if (!(lr > 0.0)) throw Error("train.lr must be positive");
    if (weight_decay < 0.0) throw Error("train.weight_decay must be >= 0");
    if (!(self_prompt_prob >= 0.0 && self_prompt_prob <= 1.0)) {
      throw Error("train.self_prompt_prob must lie in [0, 1]");
    }
    if (!(uniform_noise >= 0.0 && uniform_noise < 1.0)) throw Error("train.uniform_noise must lie in [0, 1)");
    if (checkpoint_every < 0) throw Error("train.checkpoint_every must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class SamplerMode { marginal_renoise, posterior };

inline std::string_view to_string(SamplerMode m) {
  return m == SamplerMode::marginal_renoise ? "marginal_renoise" : "posterior";
}

inline SamplerMode parse_sampler_mode(std::string_view s) {
  if (s == "marginal_renoise" || s == "marginal") return SamplerMode::marginal_renoise;
  if (s == "posterior") return SamplerMode::posterior;
  throw UsageError("unknown sampler mode '" + std::string(s) + "'");
}

/// Inference settings.
struct SampleConfig {
  /// Inference steps S (a subsequence of the T training steps).
  int steps = 100;
  /// Self-prompting turns K per step.
  int sp_turns = 2;
  /// Target length n; 0 means the length the model was trained with.
  int length = 0;
  std::uint64_t seed = 0;
  SamplerMode mode = SamplerMode::marginal_renoise;
  bool trace = false;
  /// 0 is greedy argmax.
  double temperature = 0.0;
  /// Start each step's first turn from the previous step's estimate.
  bool carry_prompt = false;

  void validate() const {
    if (steps < 1) throw Error("sample.steps must be >= 1");
    if (sp_turns < 0) throw Error("sample.sp_turns must be >= 0");
    if (length < 0) throw Error("sample.length must be >= 0");
    if (temperature < 0.0) throw Error("sample.temperature must be >= 0");
  }

  friend bool operator==(const SampleConfig&, const SampleConfig&) = default;
};

/// Where training pairs come from and how they are shaped.
struct DataConfig {
  std::string corpus;
  std::string synthetic;
  /// 0 picks the longest source (capped at model.max_src_len).
  int source_len = 0;
  /// 0 picks the longest target (capped at model.max_tgt_len).
  int target_len = 0;
  int min_count = 1;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SampleConfig sample;
  DataConfig data;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline void reject_unknown(const json& obj, std::string_view section,
                           std::initializer_list<std::string_view> keys) {
  if (!obj.is_object()) throw UsageError("config section '" + std::string(section) + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool known = false;
    for (auto key : keys) known = known || key == k;
    if (!known) throw UsageError("unknown config key '" + std::string(section) + "." + k + "'");
  }
}

template <typename T>
void read(const json& obj, std::string_view section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("bad type for config key '" + std::string(section) + "." + key + "'");
  }
}

}  // namespace detail

inline json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},       {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
              {"d_ff", c.d_ff},             {"max_src_len", c.max_src_len},
              {"max_tgt_len", c.max_tgt_len}, {"dropout", c.dropout},
              {"time_embedding", c.time_embedding}};
}

/// vocab_size and time_steps are not user keys; they come from the data and
/// the train section.
inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
  detail::reject_unknown(j, "model", {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff",
                                      "max_src_len", "max_tgt_len", "dropout", "time_embedding"});
  detail::read(j, "model", "d_model", c.d_model);
  detail::read(j, "model", "n_heads", c.n_heads);
  detail::read(j, "model", "n_enc_layers", c.n_enc_layers);
  detail::read(j, "model", "n_dec_layers", c.n_dec_layers);
  detail::read(j, "model", "d_ff", c.d_ff);
  detail::read(j, "model", "max_src_len", c.max_src_len);
  detail::read(j, "model", "max_tgt_len", c.max_tgt_len);
  detail::read(j, "model", "dropout", c.dropout);
  detail::read(j, "model", "time_embedding", c.time_embedding);
  return c;
}

inline json to_json(const TrainConfig& c) {
  return json{{"diffusion_steps", c.diffusion_steps},
              {"schedule", std::string(to_string(c.schedule))},
              {"uniform_noise", c.uniform_noise},
              {"batch_size", c.batch_size},
              {"total_steps", c.total_steps},
              {"lr", c.lr},
              {"weight_decay", c.weight_decay},
              {"self_prompt_prob", c.self_prompt_prob},
              {"seed", c.seed},
              {"loss_on_masked_only", c.loss_on_masked_only},
              {"checkpoint_every", c.checkpoint_every}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  detail::reject_unknown(j, "train", {"diffusion_steps", "schedule", "uniform_noise", "batch_size",
                                      "total_steps", "lr", "weight_decay", "self_prompt_prob", "seed",
                                      "loss_on_masked_only", "checkpoint_every"});
  detail::read(j, "train", "diffusion_steps", c.diffusion_steps);
  if (j.contains("schedule")) {
    std::string s;
    detail::read(j, "train", "schedule", s);
    c.schedule = parse_schedule_kind(s);
  }
  detail::read(j, "train", "uniform_noise", c.uniform_noise);
  detail::read(j, "train", "batch_size", c.batch_size);
  detail::read(j, "train", "total_steps", c.total_steps);
  detail::read(j, "train", "lr", c.lr);
  detail::read(j, "train", "weight_decay", c.weight_decay);
  detail::read(j, "train", "self_prompt_prob", c.self_prompt_prob);
  detail::read(j, "train", "seed", c.seed);
  detail::read(j, "train", "loss_on_masked_only", c.loss_on_masked_only);
  detail::read(j, "train", "checkpoint_every", c.checkpoint_every);
  return c;
}

inline json to_json(const SampleConfig& c) {
  return json{{"steps", c.steps},
              {"sp_turns", c.sp_turns},
              {"length", c.length},
              {"seed", c.seed},
              {"mode", std::string(to_string(c.mode))},
              {"trace", c.trace},
              {"temperature", c.temperature},
              {"carry_prompt", c.carry_prompt}};
}

inline SampleConfig sample_config_from_json(const json& j, SampleConfig c = {}) {
  detail::reject_unknown(j, "sample", {"steps", "sp_turns", "length", "seed", "mode", "trace",
                                       "temperature", "carry_prompt"});
  detail::read(j, "sample", "steps", c.steps);
  detail::read(j, "sample", "sp_turns", c.sp_turns);
  detail::read(j, "sample", "length", c.length);
  detail::read(j, "sample", "seed", c.seed);
  if (j.contains("mode")) {
    std::string s;
    detail::read(j, "sample", "mode", s);
    c.mode = parse_sampler_mode(s);
  }
  detail::read(j, "sample", "trace", c.trace);
  detail::read(j, "sample", "temperature", c.temperature);
  detail::read(j, "sample", "carry_prompt", c.carry_prompt);
  return c;
}

inline json to_json(const DataConfig& c) {
  return json{{"corpus", c.corpus},
              {"synthetic", c.synthetic},
              {"source_len", c.source_len},
              {"target_len", c.target_len},
              {"min_count", c.min_count}};
}

inline DataConfig data_config_from_json(const json& j, DataConfig c = {}) {
  detail::reject_unknown(j, "data", {"corpus", "synthetic", "source_len", "target_len", "min_count"});
  detail::read(j, "data", "corpus", c.corpus);
  detail::read(j, "data", "synthetic", c.synthetic);
  detail::read(j, "data", "source_len", c.source_len);
  detail::read(j, "data", "target_len", c.target_len);
  detail::read(j, "data", "min_count", c.min_count);
  return c;
}

inline json to_json(const RunConfig& c) {
  return json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"sample", to_json(c.sample)},
              {"data", to_json(c.data)}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline RunConfig run_config_from_json(const json& j, RunConfig base = {}) {
  detail::reject_unknown(j, "", {"model", "train", "sample", "data"});
  if (j.contains("model")) base.model = model_config_from_json(j.at("model"), base.model);
  if (j.contains("train")) base.train = train_config_from_json(j.at("train"), base.train);
  if (j.contains("sample")) base.sample = sample_config_from_json(j.at("sample"), base.sample);
  if (j.contains("data")) base.data = data_config_from_json(j.at("data"), base.data);
  base.train.validate();
  base.sample.validate();
  if (base.data.min_count < 1) throw Error("data.min_count must be >= 1");
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// Applies one `section.key=value` override; the value is parsed as JSON,
/// falling back to a plain string.
inline void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw UsageError("override must look like section.key=value: " + std::string(assignment));
  }
  const std::string section(assignment.substr(0, dot));
  const std::string key(assignment.substr(dot + 1, eq - dot - 1));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json patch = json::object();
  patch[section] = json::object();
  patch[section][key] = value;
  cfg = run_config_from_json(patch, cfg);
}

}  // namespace dnat
