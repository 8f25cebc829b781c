// Copyright (c) 2026 The stochbp Authors
// SPDX-License-Identifier: Apache-2.0

// stochbp: dataset generation, training runs, run comparison and the two
// audits (cache charges of a transformer block, SBP gradients against the
// masked dense oracle).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stochbp/stochbp.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stochbp;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::optional<double> keep_ratio;
  std::string sampler;
  std::optional<int> boundary;
};

void add_override_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Experiment seed (overrides the config)");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--mode", o.mode, "e2e | sbp | frame_dropout | checkpoint | sbp+checkpoint");
  app->add_option("--keep-ratio", o.keep_ratio, "SBP / frame-dropout keep ratio in (0, 1]");
  app->add_option("--sampler", o.sampler, "uniform_random | diverse_feature | diverse_grad | checkerboard3d");
  app->add_option("--boundary", o.boundary, "Number of bottom units under SBP")->check(CLI::NonNegativeNumber);
}

ExperimentConfig resolve(const Overrides& o) {
  json j = json::object();
  if (!o.config.empty()) {
    std::ifstream f(o.config);
    std::stringstream ss;
    ss << f.rdbuf();
    try {
      j = json::parse(ss.str());
    } catch (const json::parse_error& e) {
      throw ConfigError(o.config + " is not valid JSON: " + e.what());
    }
  }
  if (o.seed) j["seed"] = *o.seed;
  if (!o.out.empty()) j["out"] = o.out;
  if (!o.mode.empty()) j["mode"] = o.mode;
  if (o.keep_ratio) j["sbp"]["keep_ratio"] = *o.keep_ratio;
  if (!o.sampler.empty()) j["sbp"]["sampler"] = o.sampler;
  if (o.boundary) j["sbp"]["boundary"] = *o.boundary;
  return config_from_json(j);
}

std::string fmt(double x, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, x);
  return buf;
}

int cmd_gen_data(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  for (bool test : {false, true}) {
    const Dataset d = gen_synthetic_dataset(split_spec(c, test));
    const fs::path p = dir / (test ? "test.bin" : "train.bin");
    save_dataset(d, p.string());
    std::cout << p.string() << ": " << d.size() << " clips, " << d.spec.classes << " classes, hash "
              << detail::hex64(dataset_hash(d)) << '\n';
  }
  return 0;
}

int cmd_run(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const RunRecord r = run_and_write(c);
  for (const EpochMetrics& m : r.epochs) {
    std::cout << "epoch " << m.epoch << "  loss " << fmt(m.train_loss) << "  train_acc "
              << fmt(m.train_acc) << "  test_acc " << fmt(m.test_acc) << "  " << fmt(m.epoch_seconds, 2) << "s\n";
  }
  std::cout << to_string(c.mode) << " r=" << c.sbp.keep_ratio << " status=" << r.status
            << " cached_elements=" << r.memory.cached_elements_total << " -> " << c.out << '\n';
  if (!r.message.empty()) std::cerr << "error: " << r.message << '\n';
  return r.status == "ok" ? 0 : 3;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<RunRecord> recs;
  for (const std::string& d : dirs) recs.push_back(read_run_record(d));
  const auto rows = compare_runs(recs, out);
  std::printf("%-16s %-15s %6s %-16s %8s %8s %8s %8s %8s %8s\n", "model", "mode", "r", "sampler", "test_acc",
              "delta", "space", "pred", "time", "pred");
  for (const ComparisonRow& r : rows) {
    std::printf("%-16s %-15s %6.3f %-16s %8.4f %+8.4f %8.4f %8s %8.4f %8s\n", r.model.c_str(), r.mode.c_str(),
                r.keep_ratio, r.sampler.c_str(), r.test_acc, r.acc_delta, r.space_ratio,
                std::isfinite(r.space_predicted) ? fmt(r.space_predicted).c_str() : "n/a", r.time_ratio,
                std::isfinite(r.time_predicted) ? fmt(r.time_predicted).c_str() : "n/a");
  }
  if (!out.empty()) std::cout << "wrote " << out << '\n';
  return 0;
}

// Cache charges of one transformer block per policy, next to the closed forms.
int cmd_audit_memory(std::size_t heads, std::size_t head_dim, std::size_t tokens, std::vector<double> ratios,
                     std::uint64_t seed) {
  const BlockShape shape{heads, head_dim, false, 1e-5};
  Rng rng(seed);
  ParamSet ps;
  const BlockParamIds id = add_block_params(ps, rng, shape, "block", 0);
  const Tensor x = rng.normal_tensor({tokens, shape.width()});
  auto charge = [&](const CachePolicy& p) {
    Tape t;
    transformer_block(t, t.leaf(x, true), ps.bind(t), id, shape, p);
    return t.memory_stats().cached_elements_total;
  };
  const double h = static_cast<double>(heads), d = static_cast<double>(head_dim), n = static_cast<double>(tokens);
  const std::uint64_t full = charge(CachePolicy::full());
  std::cout << "policy,keep_ratio,kept,cached_elements,closed_form,ratio,predicted_ratio\n";
  std::cout << "full,1,," << full << ',' << static_cast<std::uint64_t>(15 * h * d * n + 2 * h * n * n) << ",1,1\n";
  std::cout << "recompute,1,," << charge(CachePolicy::recompute()) << ','
            << static_cast<std::uint64_t>(2 * h * d * n) << ",,\n";
  for (double r : ratios) {
    Rng mrng(seed);
    auto m = std::make_shared<const SampleMask>(sample_uniform(tokens, r, mrng));
    const double k = static_cast<double>(m->size());
    const std::uint64_t s = charge(CachePolicy::sampled(m));
    const std::uint64_t sr = charge(CachePolicy::sampled_recompute(m));
    std::cout << "sampled," << r << ',' << m->size() << ',' << s << ','
              << static_cast<std::uint64_t>(4 * h * d * n + 11 * h * d * k + 2 * h * n * k) << ','
              << fmt(static_cast<double>(s) / static_cast<double>(full), 6) << ','
              << fmt(predict_space_ratio_transformer(d, n, r), 6) << '\n';
    std::cout << "sampled_recompute," << r << ',' << m->size() << ',' << sr << ','
              << static_cast<std::uint64_t>(h * d * n + h * d * k) << ','
              << fmt(static_cast<double>(sr) / static_cast<double>(full), 6) << ",\n";
  }
  return 0;
}

// SBP gradients against the masked dense oracle on one batch.
int cmd_audit_grad(const Overrides& o, double tol) {
  Overrides oo = o;
  if (!oo.seed && oo.config.empty()) oo.seed = 0;
  ExperimentConfig c = resolve(oo);
  const Dataset d = gen_synthetic_dataset(split_spec(c, false));
  std::vector<std::size_t> idx(std::min(c.batch_size, d.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Batch batch = detail::make_batch(d, idx, 0, idx.size());
  Rng init = Rng(c.seed).fork(1);
  Rng masks = Rng(c.seed).fork(3);
  double worst = 0.0;
  auto audit = [&](const auto& model) {
    SbpConfig s = c.sbp;
    s.checkpoint = c.mode == TrainMode::sbp_checkpoint;
    SamplerInputs in;
    Tensor feats;
    if (s.sampler == SamplerKind::diverse_feature) {
      feats = boundary_features(model, batch, s.boundary.value_or(model.default_boundary()));
      in.features = &feats;
    }
    const SbpPlan plan = apply_sbp_to_model(model, s, masks, in);
    if (plan.boundary() == 0) {
      std::cout << "boundary 0: nothing is wrapped\n";
      return;
    }
    const StepResult sbp = train_step(model, batch, plan);
    const StepResult ref = masked_oracle_step(model, batch, *plan.mask(), plan.boundary());
    std::cout << "param,unit,max_rel_diff\n";
    for (std::size_t i = 0; i < sbp.grads.size(); ++i) {
      const double e = max_rel_diff(sbp.grads[i], ref.grads[i]);
      worst = std::max(worst, e);
      std::cout << model.params().name(i) << ',' << model.params().unit(i) << ',' << e << '\n';
    }
  };
  if (c.model == ModelFamily::stt) {
    audit(SttModel(stt_config(c), init));
  } else {
    audit(MiniVideoTransformer(transformer_config(c), init));
  }
  const bool ok = worst < tol;
  std::cout << "worst " << worst << (ok ? " PASS" : " FAIL") << " (tolerance " << tol << ")\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic backpropagation experiments"};
  app.require_subcommand(1);

  Overrides gen_o, run_o, grad_o;
  auto* gen = app.add_subcommand("gen-data", "Write the train/test splits of a config as SBPDATA1 files");
  add_override_flags(gen, gen_o);

  auto* run = app.add_subcommand("run", "Train one configuration and write its record");
  add_override_flags(run, run_o);

  std::vector<std::string> dirs;
  std::string cmp_out;
  auto* cmp = app.add_subcommand("compare", "Compare run directories against their e2e run");
  cmp->add_option("runs", dirs, "Run directories")->required()->expected(2, -1);
  cmp->add_option("--out", cmp_out, "CSV output path");

  std::size_t heads = 4, head_dim = 32, tokens = 392;
  std::vector<double> ratios{0.125, 0.25, 0.5, 1.0};
  std::uint64_t audit_seed = 0;
  auto* mem = app.add_subcommand("audit-memory", "Cache charges of one transformer block by policy");
  mem->add_option("--heads", heads)->check(CLI::PositiveNumber);
  mem->add_option("--head-dim", head_dim)->check(CLI::PositiveNumber);
  mem->add_option("--tokens", tokens)->check(CLI::PositiveNumber);
  mem->add_option("--keep-ratio", ratios, "Keep ratios (repeatable)");
  mem->add_option("--seed", audit_seed);

  double tol = 1e-9;
  auto* grad = app.add_subcommand("audit-grad", "Compare SBP gradients with the masked dense oracle");
  add_override_flags(grad, grad_o);
  grad->add_option("--tolerance", tol);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(gen_o);
    if (*run) return cmd_run(run_o);
    if (*cmp) return cmd_compare(dirs, cmp_out);
    if (*mem) {
      for (double r : ratios) check_keep_ratio(r);
      return cmd_audit_memory(heads, head_dim, tokens, ratios, audit_seed);
    }
    if (*grad) return cmd_audit_grad(grad_o, tol);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
