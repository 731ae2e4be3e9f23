#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polgrad/config.hpp"
#include "polgrad/diagnostics.hpp"
#include "polgrad/env.hpp"
#include "polgrad/optim.hpp"
#include "polgrad/rollout.hpp"
#include "polgrad/serialize.hpp"
#include "polgrad/steppers.hpp"

namespace polgrad {

/// Number of trailing iterations averaged into a run's final reward.
inline constexpr int kFinalRewardWindow = 10;

struct RunSpec {
  EnvId env = EnvId::pendulum;
  AlgoConfig config;
  std::uint64_t seed = 0;
  int iterations = 100;
  int heldout_trajectories = 5;
  /// Heldout diagnostics every `diag_cadence` iterations (iteration 0 included).
  int diag_cadence = 1;
  std::string manifest_hash;
  /// When set, per-iteration batches and old/new policies are dumped here.
  std::string dump_dir;
};

struct RunResult {
  std::vector<MetricsRecord> metrics;
  std::vector<StepReport> reports;
  GaussianPolicy policy;
  ValueFunction value;
  double final_reward = 0.0;
  bool diverged = false;
  std::string error;
};

/// Mean raw episode reward over the last ten iterations; -inf for a run that
/// diverged.
inline double final_reward(const std::vector<MetricsRecord>& metrics, bool diverged) {
  if (diverged) return -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  int n = 0;
  const int start = std::max(0, static_cast<int>(metrics.size()) - kFinalRewardWindow);
  for (std::size_t i = static_cast<std::size_t>(start); i < metrics.size(); ++i) {
    if (std::isfinite(metrics[i].mean_raw_episode_reward)) {
      sum += metrics[i].mean_raw_episode_reward;
      ++n;
    }
  }
  return n ? sum / n : std::nan("");
}

inline std::string iteration_tag(int it) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", it);
  return buf;
}

inline RunResult train_run(const RunSpec& spec) {
  const AlgoConfig& cfg = spec.config;
  validate(cfg);
  if (spec.iterations < 1) throw ConfigError("iterations must be >= 1");

  EnvPipeline pipeline(spec.env, derive_seed(spec.seed, "env"), pipeline_config(cfg));
  const int od = pipeline.env().obs_dim();
  const int ad = pipeline.env().act_dim();

  RunResult out;
  out.policy = build_policy(cfg, od, ad, derive_seed(spec.seed, "policy-init"));
  out.value = build_value(cfg, od, derive_seed(spec.seed, "value-init"));
  const LrSchedule sched = cfg.opts.lr_anneal ? LrSchedule::linear_anneal : LrSchedule::constant;
  OptimState opt{AdamState(out.policy.param_count(), cfg.policy_lr, sched),
                 AdamState(out.value.net().param_count(), cfg.value_lr, sched)};
  const StepConfig step = step_config(cfg);
  const KLSchedule kl_sched{cfg.kl_constraint,
                            cfg.opts.kl_decay ? KlScheduleMode::linear_decay : KlScheduleMode::constant,
                            spec.iterations};

  Rng sample_rng(derive_seed(spec.seed, "sample"));
  Rng update_rng(derive_seed(spec.seed, "update"));
  Rng heldout_rng(derive_seed(spec.seed, "heldout"));
  const std::string chash = hex64(config_hash(cfg));
  if (!spec.dump_dir.empty()) std::filesystem::create_directories(spec.dump_dir);

  for (int it = 0; it < spec.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      RolloutBatch batch = collect_rollout(out.policy, out.value, pipeline, cfg.timesteps, sample_rng);
      compute_gae(batch, cfg.gamma, cfg.gae_lambda);
      if (cfg.opts.adv_norm) normalize_advantages(batch);
      const GaussianPolicy old = out.policy;

      StepReport report;
      if (is_trpo_family(cfg.algo)) {
        report = trpo_step(batch, out.policy, out.value, step, kl_schedule(kl_sched, it), opt, it,
                           spec.iterations, update_rng);
      } else {
        report = ppo_update(batch, out.policy, out.value, step, opt, it, spec.iterations, update_rng);
      }
      if (!out.policy.flatten().allFinite()) throw NumericError("policy parameters became non-finite");

      const TrainMetrics tm = train_metrics(batch, out.policy, old);
      MetricsRecord rec;
      rec.iteration = it;
      rec.seed = spec.seed;
      rec.algo = to_string(cfg.algo);
      rec.config_hash = chash;
      rec.manifest_hash = spec.manifest_hash;
      rec.mean_raw_episode_reward = batch.mean_episode_return();
      rec.max_ratio = tm.max_ratio;
      rec.mean_kl = tm.mean_kl;
      rec.max_kl = tm.max_kl;
      rec.ratio_overflow = tm.ratio_overflow;
      if (is_trpo_family(cfg.algo)) {
        rec.trpo_delta = report.delta;
        if (report.accepted) rec.step_kl = report.step_kl;
      }
      rec.step_accepted = report.accepted;
      rec.policy_loss = report.policy_loss;
      rec.value_loss = report.value_loss;
      rec.lr = report.lr;
      rec.clip_eps = cfg.clip_eps;
      rec.grad_clip_events = report.grad_clip_events;
      rec.action_clip_count = batch.action_clip_count;
      if (spec.diag_cadence > 0 && it % spec.diag_cadence == 0) {
        auto held = heldout_metrics(out.policy, old,
                                    pipeline.frozen_copy(derive_seed(spec.seed ^ static_cast<std::uint64_t>(it),
                                                                     "heldout-env")),
                                    spec.heldout_trajectories, heldout_rng);
        if (held) {
          rec.heldout_mean_kl = held->mean_kl;
          rec.heldout_max_ratio = held->max_ratio;
        }
      }
      if (!spec.dump_dir.empty()) {
        const std::string tag = spec.dump_dir + "/" + iteration_tag(it);
        write_batch_csv(tag + "_batch.csv", batch);
        save_policy(tag + "_policy_old", old);
        save_policy(tag + "_policy_new", out.policy);
      }
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.metrics.push_back(std::move(rec));
      out.reports.push_back(report);
    } catch (const NumericError& e) {
      out.diverged = true;
      out.error = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
  }
  out.final_reward = final_reward(out.metrics, out.diverged);
  return out;
}

inline nlohmann::json json_number(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

inline nlohmann::json config_json(const AlgoConfig& c) {
  nlohmann::json rows = nlohmann::json::object();
  for (const auto& [k, v] : config_rows(c)) rows[k] = v;
  return {{"algo", to_string(c.algo)}, {"rows", rows}};
}

inline AlgoConfig config_from_json(const nlohmann::json& j) {
  AlgoConfig c = default_algo_config(parse_algo(j.at("algo").get<std::string>()));
  for (const auto& [k, v] : j.at("rows").items()) apply_config_row(c, k, v.get<std::string>());
  return c;
}

/// Writes metrics.csv, timing.csv, policy/value snapshots and run.json (last,
/// so its presence marks a complete run).
inline void write_run_dir(const std::string& dir, const RunSpec& spec, const RunResult& r,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  write_metrics_csv(dir + "/metrics.csv", r.metrics);
  {
    std::ofstream f(dir + "/timing.csv");
    f << "iteration,wall_seconds\n";
    for (const auto& m : r.metrics) f << m.iteration << ',' << csv::format_double(m.wall_seconds) << '\n';
  }
  save_policy(dir + "/policy", r.policy);
  save_net(dir + "/value", r.value.net());
  nlohmann::json j = {{"env", to_string(spec.env)},
                      {"seed", spec.seed},
                      {"iterations", spec.iterations},
                      {"heldout_trajectories", spec.heldout_trajectories},
                      {"diag_cadence", spec.diag_cadence},
                      {"config_hash", hex64(config_hash(spec.config))},
                      {"manifest_hash", spec.manifest_hash},
                      {"config", config_json(spec.config)},
                      {"completed_iterations", r.metrics.size()},
                      {"final_reward", json_number(r.final_reward)},
                      {"diverged", r.diverged},
                      {"error", r.error},
                      {"complete", true}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream f(dir + "/run.json");
  f << j.dump(2) << '\n';
}

}  // namespace polgrad
