// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration, read from JSON. Every object rejects keys it
// does not know. Example:
//
//   {
//     "model": "mini_transformer",
//     "mode": "sbp",
//     "seed": 1,
//     "epochs": 6, "batch_size": 16,
//     "data": {"train_samples": 2000, "test_samples": 500, "frames": 16,
//              "height": 4, "width": 4, "classes": 4, "noise": 0.5},
//     "transformer": {"heads": 2, "head_dim": 8, "layers": 4},
//     "sbp": {"keep_ratio": 0.25, "sampler": "uniform_random", "boundary": 1},
//     "optim": {"lr": 0.05, "momentum": 0.9, "spatial_lr_multiplier": 0.1}
//   }

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "stochbp/errors.hpp"
#include "stochbp/harness/dataset.hpp"
#include "stochbp/sbp/samplers.hpp"
#include "stochbp/sbp/sbp.hpp"

namespace stochbp {

enum class ModelFamily { mini_transformer, stt };
enum class TrainMode { e2e, sbp, frame_dropout, checkpoint, sbp_checkpoint };

inline std::string to_string(ModelFamily m) { return m == ModelFamily::stt ? "stt" : "mini_transformer"; }

inline ModelFamily parse_model_family(const std::string& s) {
  if (s == "mini_transformer") return ModelFamily::mini_transformer;
  if (s == "stt") return ModelFamily::stt;
  throw ConfigError("unknown model family '" + s + "' (expected mini_transformer or stt)");
}

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::e2e: return "e2e";
    case TrainMode::sbp: return "sbp";
    case TrainMode::frame_dropout: return "frame_dropout";
    case TrainMode::checkpoint: return "checkpoint";
    case TrainMode::sbp_checkpoint: return "sbp+checkpoint";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  for (TrainMode m : {TrainMode::e2e, TrainMode::sbp, TrainMode::frame_dropout, TrainMode::checkpoint,
                      TrainMode::sbp_checkpoint})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "' (expected e2e, sbp, frame_dropout, checkpoint or sbp+checkpoint)");
}

inline bool uses_sampling(TrainMode m) { return m == TrainMode::sbp || m == TrainMode::sbp_checkpoint; }

struct DataConfig {
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  VideoShape video;
  std::size_t classes = 4;
  double noise = 0.5;
  /// Defaults to the experiment seed.
  std::optional<std::uint64_t> seed;
};

struct TransformerArch {
  std::size_t heads = 2;
  std::size_t head_dim = 8;
  std::size_t layers = 4;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  bool causal = false;
};

struct SttArch {
  std::size_t chunk = 2;
  std::size_t spatial_hidden = 32;
  std::size_t heads = 2;
  std::size_t head_dim = 8;
};

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  /// Applied to parameters of the units below the boundary, in every mode.
  double spatial_lr_multiplier = 0.1;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;
  /// "constant", or "cosine": per-step decay from lr to 0 over the run.
  std::string schedule = "constant";
};

struct ExperimentConfig {
  ModelFamily model = ModelFamily::mini_transformer;
  TrainMode mode = TrainMode::e2e;
  std::uint64_t seed = 0;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::string out = "runs/default";
  DataConfig data;
  TransformerArch transformer;
  SttArch stt;
  /// keep_ratio/sampler/boundary/resample/independent; `checkpoint` follows the mode.
  SbpConfig sbp = [] {
    SbpConfig s;
    s.keep_ratio = 0.25;
    return s;
  }();
  OptimConfig optim;

  std::uint64_t data_seed() const { return data.seed.value_or(seed); }

  /// SBP unit count of the configured model.
  int unit_count() const { return model == ModelFamily::stt ? 1 : static_cast<int>(transformer.layers); }

  int default_boundary() const {
    return model == ModelFamily::stt ? 1 : std::max(0, static_cast<int>(transformer.layers) - 3);
  }

  int boundary() const { return sbp.boundary.value_or(default_boundary()); }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (data.train_samples == 0 || data.test_samples == 0) throw ConfigError("train and test splits must be non-empty");
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
    if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) throw ConfigError("optim.momentum must be in [0, 1)");
    if (!(optim.spatial_lr_multiplier > 0.0)) throw ConfigError("optim.spatial_lr_multiplier must be positive");
    if (!(optim.grad_clip >= 0.0)) throw ConfigError("optim.grad_clip must be non-negative");
    if (optim.schedule != "constant" && optim.schedule != "cosine") {
      throw ConfigError("optim.schedule must be constant or cosine, got " + optim.schedule);
    }
    sbp.validate();
    if (boundary() > unit_count()) {
      throw ConfigError("sbp.boundary " + std::to_string(boundary()) + " exceeds the model's " +
                        std::to_string(unit_count()) + " units");
    }
    if (uses_sampling(mode) && sbp.sampler == SamplerKind::checkerboard3d) check_checkerboard_ratio(sbp.keep_ratio);
    if (mode == TrainMode::frame_dropout && sbp.sampler != SamplerKind::uniform_random) {
      throw ConfigError("frame_dropout samples frames uniformly; sbp.sampler must be uniform_random");
    }
    if (model == ModelFamily::mini_transformer) {
      if (transformer.layers == 0 || transformer.heads == 0 || transformer.head_dim == 0) {
        throw ConfigError("transformer sizes must be positive");
      }
      const std::size_t ph = transformer.patch_h ? transformer.patch_h : data.video.height;
      const std::size_t pw = transformer.patch_w ? transformer.patch_w : data.video.width;
      if (data.video.height % ph || data.video.width % pw) throw ConfigError("patch size does not tile the frame");
    } else {
      if (stt.chunk == 0 || data.video.frames % stt.chunk) throw ConfigError("stt.chunk must divide data.frames");
      if (stt.spatial_hidden == 0 || stt.heads == 0 || stt.head_dim == 0) throw ConfigError("stt sizes must be positive");
    }
  }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(where + "." + key + " must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::read_size;
  detail::check_keys(j,
                     {"model", "mode", "seed", "epochs", "batch_size", "out", "data", "transformer", "stt", "sbp",
                      "optim"},
                     "config");
  ExperimentConfig c;
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is mandatory");
  if (!j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0)) {
    throw ConfigError("config.seed must be a non-negative integer");
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  std::string s;
  if (j.contains("model")) {
    read(j, "model", s, "config");
    c.model = parse_model_family(s);
  }
  if (j.contains("mode")) {
    read(j, "mode", s, "config");
    c.mode = parse_train_mode(s);
  }
  read_size(j, "epochs", c.epochs, "config");
  read_size(j, "batch_size", c.batch_size, "config");
  read(j, "out", c.out, "config");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d,
                       {"train_samples", "test_samples", "channels", "frames", "height", "width", "classes", "noise",
                        "seed"},
                       "data");
    read_size(d, "train_samples", c.data.train_samples, "data");
    read_size(d, "test_samples", c.data.test_samples, "data");
    read_size(d, "channels", c.data.video.channels, "data");
    read_size(d, "frames", c.data.video.frames, "data");
    read_size(d, "height", c.data.video.height, "data");
    read_size(d, "width", c.data.video.width, "data");
    read_size(d, "classes", c.data.classes, "data");
    read(d, "noise", c.data.noise, "data");
    if (d.contains("seed")) {
      std::size_t ds = 0;
      read_size(d, "seed", ds, "data");
      c.data.seed = ds;
    }
  }
  if (j.contains("transformer")) {
    const auto& t = j.at("transformer");
    detail::check_keys(t, {"heads", "head_dim", "layers", "patch_h", "patch_w", "causal"}, "transformer");
    read_size(t, "heads", c.transformer.heads, "transformer");
    read_size(t, "head_dim", c.transformer.head_dim, "transformer");
    read_size(t, "layers", c.transformer.layers, "transformer");
    read_size(t, "patch_h", c.transformer.patch_h, "transformer");
    read_size(t, "patch_w", c.transformer.patch_w, "transformer");
    read(t, "causal", c.transformer.causal, "transformer");
  }
  if (j.contains("stt")) {
    const auto& t = j.at("stt");
    detail::check_keys(t, {"chunk", "spatial_hidden", "heads", "head_dim"}, "stt");
    read_size(t, "chunk", c.stt.chunk, "stt");
    read_size(t, "spatial_hidden", c.stt.spatial_hidden, "stt");
    read_size(t, "heads", c.stt.heads, "stt");
    read_size(t, "head_dim", c.stt.head_dim, "stt");
  }
  if (j.contains("sbp")) {
    const auto& t = j.at("sbp");
    detail::check_keys(t, {"keep_ratio", "sampler", "boundary", "resample_each_step", "independent_per_layer"}, "sbp");
    read(t, "keep_ratio", c.sbp.keep_ratio, "sbp");
    if (t.contains("sampler")) {
      read(t, "sampler", s, "sbp");
      c.sbp.sampler = parse_sampler(s);
    }
    if (t.contains("boundary")) {
      std::size_t b = 0;
      read_size(t, "boundary", b, "sbp");
      c.sbp.boundary = static_cast<int>(b);
    }
    read(t, "resample_each_step", c.sbp.resample_each_step, "sbp");
    read(t, "independent_per_layer", c.sbp.independent_per_layer, "sbp");
  }
  if (j.contains("optim")) {
    const auto& t = j.at("optim");
    detail::check_keys(t, {"lr", "momentum", "spatial_lr_multiplier", "grad_clip", "schedule"}, "optim");
    read(t, "lr", c.optim.lr, "optim");
    read(t, "momentum", c.optim.momentum, "optim");
    read(t, "spatial_lr_multiplier", c.optim.spatial_lr_multiplier, "optim");
    read(t, "grad_clip", c.optim.grad_clip, "optim");
    read(t, "schedule", c.optim.schedule, "optim");
  }
  c.sbp.checkpoint = c.mode == TrainMode::sbp_checkpoint;
  c.sbp.seed = c.seed;
  c.validate();
  return c;
}

/// Canonical JSON form; `with_out` = false drops the output path, which
/// does not affect results.
inline nlohmann::json config_to_json(const ExperimentConfig& c, bool with_out = true) {
  nlohmann::json j;
  j["model"] = to_string(c.model);
  j["mode"] = to_string(c.mode);
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  if (with_out) j["out"] = c.out;
  j["data"] = {{"train_samples", c.data.train_samples}, {"test_samples", c.data.test_samples},
               {"channels", c.data.video.channels},     {"frames", c.data.video.frames},
               {"height", c.data.video.height},         {"width", c.data.video.width},
               {"classes", c.data.classes},             {"noise", c.data.noise},
               {"seed", c.data_seed()}};
  if (c.model == ModelFamily::mini_transformer) {
    j["transformer"] = {{"heads", c.transformer.heads},     {"head_dim", c.transformer.head_dim},
                        {"layers", c.transformer.layers},   {"patch_h", c.transformer.patch_h},
                        {"patch_w", c.transformer.patch_w}, {"causal", c.transformer.causal}};
  } else {
    j["stt"] = {{"chunk", c.stt.chunk},
                {"spatial_hidden", c.stt.spatial_hidden},
                {"heads", c.stt.heads},
                {"head_dim", c.stt.head_dim}};
  }
  j["sbp"] = {{"keep_ratio", c.sbp.keep_ratio},
              {"sampler", to_string(c.sbp.sampler)},
              {"boundary", c.boundary()},
              {"resample_each_step", c.sbp.resample_each_step},
              {"independent_per_layer", c.sbp.independent_per_layer}};
  j["optim"] = {{"lr", c.optim.lr},
                {"momentum", c.optim.momentum},
                {"spatial_lr_multiplier", c.optim.spatial_lr_multiplier},
                {"grad_clip", c.optim.grad_clip},
                {"schedule", c.optim.schedule}};
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(config_to_json(c, false).dump()); }

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Dataset spec of one split; the test split uses a derived seed.
inline DatasetSpec split_spec(const ExperimentConfig& c, bool test) {
  DatasetSpec s;
  s.samples = test ? c.data.test_samples : c.data.train_samples;
  s.video = c.data.video;
  s.classes = c.data.classes;
  s.noise = c.data.noise;
  s.seed = test ? Rng(c.data_seed()).fork(1).next_u64() : c.data_seed();
  s.motif_seed = Rng(c.data_seed()).fork(2).next_u64();
  return s;
}

}  // namespace stochbp
