// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// Training runs and their CSV records.
//
// A run directory holds:
//   config.json        the resolved configuration (loadable with load_config)
//   summary.csv        model,mode,keep_ratio,sampler,boundary,seed,config_hash,dataset_hash,status,epochs,
//                      final_train_loss,final_train_acc,final_test_acc,cached_elements,forward_ops,
//                      backward_ops,mean_step_seconds
//   epochs.csv         epoch,train_loss,train_acc,test_acc,epoch_seconds,mean_step_seconds
//   memory_layers.csv  layer,cached_elements,forward_ops,backward_ops
// Memory and op counts come from one probe step on the first training batch
// after training. Hashes are 16 hex digits.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "stochbp/analysis/analysis.hpp"
#include "stochbp/harness/config.hpp"
#include "stochbp/harness/dataset.hpp"
#include "stochbp/models/step.hpp"
#include "stochbp/models/stt.hpp"
#include "stochbp/models/transformer.hpp"
#include "stochbp/sbp/samplers.hpp"
#include "stochbp/sbp/sbp.hpp"

namespace stochbp {

/// SGD with heavy-ball momentum: v = mu v + g, p -= lr_i v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum) : mu_(momentum) {}

  void step(ParamSet& params, const std::vector<Tensor>& grads, const std::vector<double>& lr) {
    if (grads.size() != params.size() || lr.size() != params.size()) {
      throw ContractError("sgd: gradient/learning-rate count does not match the parameters");
    }
    if (v_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) v_.emplace_back(params.value(i).shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params.value(i);
      auto v = v_[i].data();
      const auto g = grads[i].data();
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = mu_ * v[k] + g[k];
        p[k] -= lr[i] * v[k];
      }
    }
  }

 private:
  double mu_;
  std::vector<Tensor> v_;
};

/// Scales `grads` so their global L2 norm is at most `max_norm`.
inline void clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm <= 0.0 || norm <= max_norm) return;
  for (Tensor& g : grads)
    for (double& x : g.data()) x *= max_norm / norm;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double epoch_seconds = 0.0;
  double mean_step_seconds = 0.0;
};

struct RunRecord {
  ExperimentConfig config;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  /// "ok" or "diverged".
  std::string status = "ok";
  std::string message;
  std::vector<EpochMetrics> epochs;
  MemoryStats memory;
  OpCounter ops;
  double mean_step_seconds = 0.0;

  double final_test_acc() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }
  double final_train_loss() const {
    return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().train_loss;
  }
  double final_train_acc() const { return epochs.empty() ? 0.0 : epochs.back().train_acc; }
};

inline MiniTransformerConfig transformer_config(const ExperimentConfig& c) {
  MiniTransformerConfig m;
  m.video = c.data.video;
  m.patch_h = c.transformer.patch_h;
  m.patch_w = c.transformer.patch_w;
  m.block = {c.transformer.heads, c.transformer.head_dim, c.transformer.causal, 1e-5};
  m.layers = c.transformer.layers;
  m.classes = c.data.classes;
  return m;
}

inline SttConfig stt_config(const ExperimentConfig& c) {
  SttConfig s;
  s.video = c.data.video;
  s.chunk = c.stt.chunk;
  s.spatial_hidden = c.stt.spatial_hidden;
  s.temporal = {c.stt.heads, c.stt.head_dim, true, 1e-5};
  s.classes = c.data.classes;
  return s;
}

/// Tape layer ids of the units below the boundary.
inline std::set<int> wrapped_layer_ids(const ExperimentConfig& c) {
  const int b = c.boundary();
  if (c.model == ModelFamily::stt) return b > 0 ? std::set<int>{0} : std::set<int>{};
  std::set<int> ids;
  for (int l = 0; l <= b && b > 0; ++l) ids.insert(l);
  return ids;
}

namespace detail {

/// Draws the per-step SBP plan or frame-dropout subset for one mode.
template <StepModel Model>
class StepDriver {
 public:
  StepDriver(const Model& model, const ExperimentConfig& c, std::uint64_t stream)
      : model_(model), c_(c), rng_(Rng(c.seed).fork(stream)) {}

  StepResult run(const Batch& batch) {
    const int b = c_.boundary();
    switch (c_.mode) {
      case TrainMode::e2e: return train_step(model_, batch, SbpPlan::none());
      case TrainMode::checkpoint: return train_step(model_, batch, SbpPlan::checkpoint_only(b));
      case TrainMode::frame_dropout:
        return frame_dropout_step(model_, batch, sample_uniform(model_.frame_count(), c_.sbp.keep_ratio, rng_).kept());
      case TrainMode::sbp:
      case TrainMode::sbp_checkpoint: break;
    }
    if (!plan_ || c_.sbp.resample_each_step) {
      SamplerInputs in;
      Tensor feats;
      if (c_.sbp.sampler == SamplerKind::diverse_feature) {
        feats = boundary_features(model_, batch, b);
        in.features = &feats;
      }
      if (c_.sbp.sampler == SamplerKind::diverse_grad && !last_mags_.empty()) in.grad_magnitudes = &last_mags_;
      plan_ = apply_sbp_to_model(model_, c_.sbp, rng_, in);
    }
    const int retain = c_.sbp.sampler == SamplerKind::diverse_grad ? model_.boundary_layer_id(b) : -1;
    StepResult r = train_step(model_, batch, *plan_, retain);
    if (retain >= 0) last_mags_ = r.boundary_grad_magnitudes;
    return r;
  }

 private:
  const Model& model_;
  const ExperimentConfig& c_;
  Rng rng_;
  std::optional<SbpPlan> plan_;
  Tensor last_mags_;
};

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    b.clips.push_back(&d.clips[order[i]]);
    b.labels.push_back(d.labels[order[i]]);
  }
  return b;
}

template <class Model>
double accuracy(const Model& model, const Dataset& d) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) correct += argmax_row(model.predict(d.clips[i])) == d.labels[i];
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

template <StepModel Model>
void train(Model& model, const ExperimentConfig& c, const Dataset& train_set, const Dataset& test_set,
           RunRecord& rec) {
  using clock = std::chrono::steady_clock;
  const int boundary = c.boundary();
  std::vector<double> lr(model.params().size(), c.optim.lr);
  for (std::size_t i = 0; i < lr.size(); ++i) {
    const int u = model.params().unit(i);
    if (u >= 0 && u < boundary) lr[i] *= c.optim.spatial_lr_multiplier;
  }
  SgdMomentum opt(c.optim.momentum);
  StepDriver<Model> driver(model, c, 3);
  Rng shuffle = Rng(c.seed).fork(2);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double step_seconds_total = 0.0;
  std::size_t steps_total = 0;
  const std::size_t steps_per_epoch = (order.size() + c.batch_size - 1) / c.batch_size;
  const double planned_steps = static_cast<double>(steps_per_epoch * c.epochs);
  std::vector<double> step_lr = lr;
  try {
    for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
      const auto t0 = clock::now();
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
      double loss_sum = 0.0, step_seconds = 0.0;
      std::size_t correct = 0, steps = 0;
      for (std::size_t begin = 0; begin < order.size(); begin += c.batch_size) {
        const std::size_t end = std::min(order.size(), begin + c.batch_size);
        const Batch batch = make_batch(train_set, order, begin, end);
        const auto s0 = clock::now();
        StepResult r = driver.run(batch);
        clip_grad_norm(r.grads, c.optim.grad_clip);
        if (c.optim.schedule == "cosine") {
          const double t = static_cast<double>(steps_total + steps) / planned_steps;
          const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
          for (std::size_t i = 0; i < lr.size(); ++i) step_lr[i] = lr[i] * f;
        }
        opt.step(model.params(), r.grads, step_lr);
        step_seconds += std::chrono::duration<double>(clock::now() - s0).count();
        loss_sum += r.loss * static_cast<double>(batch.size());
        correct += r.correct;
        ++steps;
      }
      EpochMetrics m;
      m.epoch = epoch;
      m.train_loss = loss_sum / static_cast<double>(order.size());
      m.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
      m.test_acc = accuracy(model, test_set);
      m.mean_step_seconds = step_seconds / static_cast<double>(steps);
      m.epoch_seconds = std::chrono::duration<double>(clock::now() - t0).count();
      rec.epochs.push_back(m);
      step_seconds_total += step_seconds;
      steps_total += steps;
    }
  } catch (const NumericError& e) {
    rec.status = "diverged";
    rec.message = e.what();
  }
  rec.mean_step_seconds = steps_total ? step_seconds_total / static_cast<double>(steps_total) : 0.0;

  // Probe step for the cost counters; parameters are not updated.
  std::vector<std::size_t> first(std::min(c.batch_size, train_set.size()));
  std::iota(first.begin(), first.end(), std::size_t{0});
  StepDriver<Model> probe(model, c, 7);
  try {
    const StepResult r = probe.run(make_batch(train_set, first, 0, first.size()));
    rec.memory = r.memory;
    rec.ops = r.ops;
  } catch (const NumericError& e) {
    rec.status = "diverged";
    if (rec.message.empty()) rec.message = e.what();
  }
}

}  // namespace detail

/// Trains a caller-built model in place (it must match c.model); nothing is written.
template <StepModel Model>
RunRecord train_model(Model& model, const ExperimentConfig& c, const Dataset& train_set, const Dataset& test_set) {
  c.validate();
  RunRecord rec;
  rec.config = c;
  rec.config_hash = config_hash(c);
  rec.dataset_hash = fnv1a(serialize_dataset(train_set) + serialize_dataset(test_set));
  detail::train(model, c, train_set, test_set, rec);
  return rec;
}

/// Trains on a dataset pair; nothing is written.
inline RunRecord run_experiment(const ExperimentConfig& c, const Dataset& train_set, const Dataset& test_set) {
  c.validate();
  Rng init = Rng(c.seed).fork(1);
  if (c.model == ModelFamily::mini_transformer) {
    MiniVideoTransformer model(transformer_config(c), init);
    return train_model(model, c, train_set, test_set);
  }
  SttModel model(stt_config(c), init);
  return train_model(model, c, train_set, test_set);
}

/// Generates both splits from the config and trains.
inline RunRecord run_experiment(const ExperimentConfig& c) {
  c.validate();
  return run_experiment(c, gen_synthetic_dataset(split_spec(c, false)), gen_synthetic_dataset(split_spec(c, true)));
}

// ------------------------------------------------------------------ CSV

namespace detail {

inline std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

inline std::string num(double x) {
  if (std::isnan(x)) return "";
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(10);
  s << x;
  return s.str();
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Rows of a CSV file keyed by header name.
inline std::vector<std::map<std::string, std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ConfigError(path.string() + " is empty");
  const auto header = split_csv(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw ConfigError(path.string() + ": ragged row");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

inline double to_double(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  double x = 0.0;
  in >> x;
  if (in.fail()) throw ConfigError("bad number '" + s + "' in CSV");
  return x;
}

inline std::uint64_t to_u64(const std::string& s, int base = 10) {
  try {
    return std::stoull(s, nullptr, base);
  } catch (const std::exception&) {
    throw ConfigError("bad integer '" + s + "' in CSV");
  }
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw ConfigError("cannot write " + p.string());
  f.imbue(std::locale::classic());
  return f;
}

}  // namespace detail

inline void write_run_record(const RunRecord& rec, const std::filesystem::path& dir) {
  using detail::num;
  std::filesystem::create_directories(dir);
  {
    auto f = detail::open_out(dir / "config.json");
    f << config_to_json(rec.config).dump(2) << '\n';
  }
  {
    auto f = detail::open_out(dir / "summary.csv");
    f << "model,mode,keep_ratio,sampler,boundary,seed,config_hash,dataset_hash,status,epochs,final_train_loss,"
         "final_train_acc,final_test_acc,cached_elements,forward_ops,backward_ops,mean_step_seconds\n";
    const ExperimentConfig& c = rec.config;
    f << to_string(c.model) << ',' << to_string(c.mode) << ',' << num(c.sbp.keep_ratio) << ','
      << to_string(c.sbp.sampler) << ',' << c.boundary() << ',' << c.seed << ',' << detail::hex64(rec.config_hash)
      << ',' << detail::hex64(rec.dataset_hash) << ',' << rec.status << ',' << rec.epochs.size() << ','
      << num(rec.final_train_loss()) << ',' << num(rec.final_train_acc()) << ',' << num(rec.final_test_acc()) << ','
      << rec.memory.cached_elements_total << ',' << rec.ops.forward_elementary_ops << ','
      << rec.ops.backward_elementary_ops << ',' << num(rec.mean_step_seconds) << '\n';
  }
  {
    auto f = detail::open_out(dir / "epochs.csv");
    f << "epoch,train_loss,train_acc,test_acc,epoch_seconds,mean_step_seconds\n";
    for (const EpochMetrics& m : rec.epochs) {
      f << m.epoch << ',' << num(m.train_loss) << ',' << num(m.train_acc) << ',' << num(m.test_acc) << ','
        << num(m.epoch_seconds) << ',' << num(m.mean_step_seconds) << '\n';
    }
  }
  {
    auto f = detail::open_out(dir / "memory_layers.csv");
    f << "layer,cached_elements,forward_ops,backward_ops\n";
    std::set<int> layers;
    for (const auto& [l, n] : rec.memory.cached_elements_per_layer) layers.insert(l);
    for (const auto& [l, n] : rec.ops.forward_per_layer) layers.insert(l);
    for (const auto& [l, n] : rec.ops.backward_per_layer) layers.insert(l);
    for (int l : layers) {
      f << l << ',' << rec.memory.layer(l) << ',' << rec.ops.forward_of(l) << ',' << rec.ops.backward_of(l) << '\n';
    }
  }
  if (!rec.message.empty()) {
    auto f = detail::open_out(dir / "error.txt");
    f << rec.message << '\n';
  }
}

inline RunRecord read_run_record(const std::filesystem::path& dir) {
  RunRecord rec;
  rec.config = load_config((dir / "config.json").string());
  const auto summary = detail::read_csv(dir / "summary.csv");
  if (summary.size() != 1) throw ConfigError((dir / "summary.csv").string() + " must hold exactly one run");
  const auto& s = summary.front();
  rec.config_hash = detail::to_u64(s.at("config_hash"), 16);
  rec.dataset_hash = detail::to_u64(s.at("dataset_hash"), 16);
  rec.status = s.at("status");
  rec.mean_step_seconds = detail::to_double(s.at("mean_step_seconds"));
  for (const auto& row : detail::read_csv(dir / "epochs.csv")) {
    EpochMetrics m;
    m.epoch = detail::to_u64(row.at("epoch"));
    m.train_loss = detail::to_double(row.at("train_loss"));
    m.train_acc = detail::to_double(row.at("train_acc"));
    m.test_acc = detail::to_double(row.at("test_acc"));
    m.epoch_seconds = detail::to_double(row.at("epoch_seconds"));
    m.mean_step_seconds = detail::to_double(row.at("mean_step_seconds"));
    rec.epochs.push_back(m);
  }
  for (const auto& row : detail::read_csv(dir / "memory_layers.csv")) {
    const int l = std::stoi(row.at("layer"));
    const std::uint64_t cached = detail::to_u64(row.at("cached_elements"));
    if (cached) rec.memory.charge(l, cached);
    if (const std::uint64_t f = detail::to_u64(row.at("forward_ops"))) rec.ops.add_forward(l, f);
    if (const std::uint64_t b = detail::to_u64(row.at("backward_ops"))) rec.ops.add_backward(l, b);
  }
  return rec;
}

/// Runs, then writes the record to config.out.
inline RunRecord run_and_write(const ExperimentConfig& c) {
  RunRecord rec = run_experiment(c);
  write_run_record(rec, c.out);
  return rec;
}

// ------------------------------------------------------------------ comparison

/// Keep ratio actually realized on the node axis (the mask keeps a whole number of nodes).
inline double realized_keep_ratio(const ExperimentConfig& c) {
  std::size_t nodes = c.data.video.frames;
  if (c.model == ModelFamily::stt) {
    nodes /= c.stt.chunk;
  } else if (c.sbp.sampler == SamplerKind::checkerboard3d) {
    const std::size_t ph = c.transformer.patch_h ? c.transformer.patch_h : c.data.video.height;
    const std::size_t pw = c.transformer.patch_w ? c.transformer.patch_w : c.data.video.width;
    nodes *= (c.data.video.height / ph) * (c.data.video.width / pw);
  }
  return static_cast<double>(keep_count(nodes, c.sbp.keep_ratio)) / static_cast<double>(nodes);
}

/// Predicted whole-model cached-element ratio of an SBP run against the
/// end-to-end per-layer charges in `base`. NaN for modes without a formula.
inline double predicted_space_ratio(const RunRecord& base, const ExperimentConfig& c) {
  if (c.mode == TrainMode::e2e) return 1.0;
  if (c.mode != TrainMode::sbp || c.boundary() == 0) return std::numeric_limits<double>::quiet_NaN();
  const double r = realized_keep_ratio(c);
  const double total = static_cast<double>(base.memory.cached_elements_total);
  const double m0 = static_cast<double>(base.memory.layer(0));
  if (c.model == ModelFamily::stt) return predict_space_ratio_stt(m0, total - m0, r);
  double blocks = 0.0;
  for (int l = 1; l <= c.boundary(); ++l) blocks += static_cast<double>(base.memory.layer(l));
  const std::size_t ph = c.transformer.patch_h ? c.transformer.patch_h : c.data.video.height;
  const std::size_t pw = c.transformer.patch_w ? c.transformer.patch_w : c.data.video.width;
  const double n = static_cast<double>(c.data.video.frames * (c.data.video.height / ph) * (c.data.video.width / pw));
  const double rho = predict_space_ratio_transformer(static_cast<double>(c.transformer.head_dim), n, r);
  return (r * m0 + rho * blocks + (total - m0 - blocks)) / total;
}

inline double predicted_time_ratio(const ExperimentConfig& c) {
  if (c.mode == TrainMode::e2e) return 1.0;
  if (!uses_sampling(c.mode) || c.boundary() == 0) return std::numeric_limits<double>::quiet_NaN();
  return predict_time_ratio(realized_keep_ratio(c));
}

struct ComparisonRow {
  std::string model;
  std::string mode;
  double keep_ratio = 1.0;
  std::string sampler;
  std::size_t runs = 0;
  double test_acc = 0.0;
  double acc_delta = 0.0;
  double space_ratio = 1.0;
  double space_predicted = 1.0;
  double time_ratio = 1.0;
  double time_predicted = 1.0;

  static bool conforms(double measured, double predicted) {
    return std::isfinite(predicted) && std::abs(measured - predicted) / predicted < 0.10;
  }
  bool space_ok() const { return conforms(space_ratio, space_predicted); }
  bool time_ok() const { return conforms(time_ratio, time_predicted); }
};

/// One row per (mode, keep ratio, sampler), measured against the first e2e
/// record. Accuracy is averaged over the records of a row. Writes CSV to
/// `output` unless it is empty.
inline std::vector<ComparisonRow> compare_runs(const std::vector<RunRecord>& records,
                                               const std::filesystem::path& output = {}) {
  if (records.size() < 2) throw ContractError("compare_runs: need at least 2 records");
  const RunRecord* base = nullptr;
  for (const RunRecord& r : records) {
    if (r.dataset_hash != records.front().dataset_hash) {
      throw ContractError("compare_runs: records were trained on different datasets");
    }
    if (r.config.model != records.front().config.model) {
      throw ContractError("compare_runs: records use different model families");
    }
    if (!base && r.config.mode == TrainMode::e2e) base = &r;
  }
  if (!base) throw ContractError("compare_runs: need an e2e record as the baseline");

  using Key = std::tuple<int, double, int>;
  std::map<Key, std::vector<const RunRecord*>> groups;
  std::vector<Key> key_order;
  for (const RunRecord& r : records) {
    const ExperimentConfig& c = r.config;
    const bool ratio_free = c.mode == TrainMode::e2e || c.mode == TrainMode::checkpoint;
    const Key k{static_cast<int>(c.mode), ratio_free ? 1.0 : c.sbp.keep_ratio,
                uses_sampling(c.mode) ? static_cast<int>(c.sbp.sampler) : 0};
    if (!groups.count(k)) key_order.push_back(k);
    groups[k].push_back(&r);
  }

  const std::set<int> wrapped = wrapped_layer_ids(base->config);
  double e2e_acc = 0.0;
  {
    const auto& g = groups.at(Key{static_cast<int>(TrainMode::e2e), 1.0, 0});
    for (const RunRecord* r : g) e2e_acc += r->final_test_acc();
    e2e_acc /= static_cast<double>(g.size());
  }

  std::vector<ComparisonRow> rows;
  for (const Key& k : key_order) {
    const auto& g = groups.at(k);
    const RunRecord& first = *g.front();
    ComparisonRow row;
    row.model = to_string(first.config.model);
    row.mode = to_string(first.config.mode);
    row.keep_ratio = std::get<1>(k);
    row.sampler = uses_sampling(first.config.mode) ? to_string(first.config.sbp.sampler) : "";
    row.runs = g.size();
    for (const RunRecord* r : g) row.test_acc += r->final_test_acc();
    row.test_acc /= static_cast<double>(g.size());
    row.acc_delta = row.test_acc - e2e_acc;
    row.space_ratio = detail::safe_ratio(first.memory.cached_elements_total, base->memory.cached_elements_total);
    row.time_ratio =
        cost_ratios(base->memory, base->ops, first.memory, first.ops, wrapped.empty() ? nullptr : &wrapped).time;
    row.space_predicted = predicted_space_ratio(*base, first.config);
    row.time_predicted = predicted_time_ratio(first.config);
    rows.push_back(row);
  }

  if (!output.empty()) {
    if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
    auto f = detail::open_out(output);
    using detail::num;
    f << "model,mode,keep_ratio,sampler,runs,test_acc,acc_delta,space_ratio,space_predicted,space_ok,time_ratio,"
         "time_predicted,time_ok\n";
    auto flag = [](double pred, bool ok) { return std::isfinite(pred) ? (ok ? "yes" : "no") : "n/a"; };
    for (const ComparisonRow& r : rows) {
      f << r.model << ',' << r.mode << ',' << num(r.keep_ratio) << ',' << r.sampler << ',' << r.runs << ','
        << num(r.test_acc) << ',' << num(r.acc_delta) << ',' << num(r.space_ratio) << ','
        << num(r.space_predicted) << ',' << flag(r.space_predicted, r.space_ok()) << ',' << num(r.time_ratio)
        << ',' << num(r.time_predicted) << ',' << flag(r.time_predicted, r.time_ok()) << '\n';
    }
  }
  return rows;
}

}  // namespace stochbp
