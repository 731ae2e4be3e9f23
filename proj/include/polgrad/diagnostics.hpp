#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "polgrad/csv.hpp"
#include "polgrad/env.hpp"
#include "polgrad/policy.hpp"
#include "polgrad/random.hpp"
#include "polgrad/rollout.hpp"

namespace polgrad {

struct TrainMetrics {
  double max_ratio = 1.0;
  double mean_kl = 0.0;
  double max_kl = 0.0;
  bool ratio_overflow = false;
};

/// Ratio and KL statistics over the state-action pairs of a training batch.
/// Both policies are re-evaluated, so the result depends only on the batch
/// contents and the two parameter sets.
inline TrainMetrics train_metrics(const RolloutBatch& batch, const GaussianPolicy& policy_new,
                                  const GaussianPolicy& policy_old) {
  if (batch.size() == 0) throw ContractError("train_metrics: empty batch");
  TrainMetrics m;
  const Matrix lp_new = log_prob_batch(policy_new, batch.obs, batch.actions);
  const Matrix lp_old = log_prob_batch(policy_old, batch.obs, batch.actions);
  m.max_ratio = 0.0;
  for (Eigen::Index j = 0; j < lp_new.cols(); ++j) {
    const Ratio r = ratio_from_log(lp_new(0, j), lp_old(0, j));
    m.ratio_overflow = m.ratio_overflow || r.overflow;
    m.max_ratio = std::max(m.max_ratio, r.value);
  }
  const KlStats kl = gaussian_kl(policy_new, policy_old, batch.obs);
  m.mean_kl = kl.mean;
  m.max_kl = kl.max;
  return m;
}

struct HeldoutMetrics {
  double mean_kl = 0.0;
  double max_ratio = 1.0;
};

/// Samples `n_trajectories` complete episodes with `policy_old` on a frozen
/// pipeline and measures the new/old ratio and KL on those pairs. These
/// trajectories are never used for training.
inline std::optional<HeldoutMetrics> heldout_metrics(const GaussianPolicy& policy_new,
                                                     const GaussianPolicy& policy_old,
                                                     EnvPipeline pipeline, int n_trajectories,
                                                     Rng& rng) {
  if (n_trajectories <= 0) return std::nullopt;
  if (!pipeline.frozen()) throw ContractError("heldout_metrics needs a frozen pipeline");
  std::vector<Vector> obs;
  std::vector<Vector> actions;
  for (int k = 0; k < n_trajectories; ++k) {
    pipeline.reset();
    for (;;) {
      const Vector o = pipeline.observation();
      ActionSample s = sample_action(policy_old, o, rng);
      obs.push_back(o);
      actions.push_back(s.action);
      if (pipeline.step(s.action).done) break;
    }
  }
  RolloutBatch b;
  b.obs.resize(policy_old.obs_dim(), static_cast<Eigen::Index>(obs.size()));
  b.actions.resize(policy_old.act_dim(), static_cast<Eigen::Index>(obs.size()));
  for (std::size_t j = 0; j < obs.size(); ++j) {
    b.obs.col(static_cast<Eigen::Index>(j)) = obs[j];
    b.actions.col(static_cast<Eigen::Index>(j)) = actions[j];
  }
  b.raw_reward.assign(obs.size(), 0.0);
  const TrainMetrics m = train_metrics(b, policy_new, policy_old);
  return HeldoutMetrics{m.mean_kl, m.max_ratio};
}

/// One measured iteration. Optional fields are written as empty CSV cells.
struct MetricsRecord {
  int iteration = 0;
  std::uint64_t seed = 0;
  std::string algo;
  std::string config_hash;
  std::string manifest_hash;
  double mean_raw_episode_reward = 0.0;
  double max_ratio = 1.0;
  double mean_kl = 0.0;
  double max_kl = 0.0;
  std::optional<double> heldout_mean_kl;
  std::optional<double> heldout_max_ratio;
  std::optional<double> trpo_delta;
  std::optional<double> step_kl;
  bool step_accepted = true;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double lr = 0.0;
  double clip_eps = 0.2;
  bool ratio_overflow = false;
  int grad_clip_events = 0;
  int action_clip_count = 0;
  /// Kept out of the metrics CSV so that reruns are byte-identical.
  double wall_seconds = 0.0;

  bool ratio_violation() const { return max_ratio > 1.0 + clip_eps; }
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{
      "iteration",        "seed",          "algo",           "config_hash",
      "manifest_hash",    "mean_raw_episode_reward",         "max_ratio",
      "mean_kl",          "max_kl",        "heldout_mean_kl", "heldout_max_ratio",
      "trpo_delta",       "step_kl",       "step_accepted",  "policy_loss",
      "value_loss",       "lr",            "clip_eps",       "ratio_violation",
      "ratio_overflow",   "grad_clip_events",                "action_clip_count"};
  return cols;
}

inline std::string metrics_csv_header() { return csv::join(metrics_columns()); }

inline std::string metrics_csv_row(const MetricsRecord& r) {
  using csv::format_double;
  using csv::format_optional;
  return csv::join({std::to_string(r.iteration), std::to_string(r.seed), r.algo, r.config_hash,
                    r.manifest_hash, format_double(r.mean_raw_episode_reward),
                    format_double(r.max_ratio), format_double(r.mean_kl), format_double(r.max_kl),
                    format_optional(r.heldout_mean_kl), format_optional(r.heldout_max_ratio),
                    format_optional(r.trpo_delta), format_optional(r.step_kl),
                    r.step_accepted ? "1" : "0", format_double(r.policy_loss),
                    format_double(r.value_loss), format_double(r.lr), format_double(r.clip_eps),
                    r.ratio_violation() ? "1" : "0", r.ratio_overflow ? "1" : "0",
                    std::to_string(r.grad_clip_events), std::to_string(r.action_clip_count)});
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << metrics_csv_header() << '\n';
  for (const auto& r : rows) f << metrics_csv_row(r) << '\n';
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  csv::Table t(csv::read_file(path));
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    MetricsRecord r;
    r.iteration = static_cast<int>(t.number(i, "iteration"));
    r.seed = std::stoull(t.at(i, "seed"));
    r.algo = t.at(i, "algo");
    r.config_hash = t.at(i, "config_hash");
    r.manifest_hash = t.at(i, "manifest_hash");
    r.mean_raw_episode_reward = t.number(i, "mean_raw_episode_reward");
    r.max_ratio = t.number(i, "max_ratio");
    r.mean_kl = t.number(i, "mean_kl");
    r.max_kl = t.number(i, "max_kl");
    r.heldout_mean_kl = csv::parse_optional(t.at(i, "heldout_mean_kl"));
    r.heldout_max_ratio = csv::parse_optional(t.at(i, "heldout_max_ratio"));
    r.trpo_delta = csv::parse_optional(t.at(i, "trpo_delta"));
    r.step_kl = csv::parse_optional(t.at(i, "step_kl"));
    r.step_accepted = t.at(i, "step_accepted") == "1";
    r.policy_loss = t.number(i, "policy_loss");
    r.value_loss = t.number(i, "value_loss");
    r.lr = t.number(i, "lr");
    r.clip_eps = t.number(i, "clip_eps");
    r.ratio_overflow = t.at(i, "ratio_overflow") == "1";
    r.grad_clip_events = static_cast<int>(t.number(i, "grad_clip_events"));
    r.action_clip_count = static_cast<int>(t.number(i, "action_clip_count"));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace polgrad
