#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "polgrad/csv.hpp"
#include "polgrad/env.hpp"
#include "polgrad/error.hpp"
#include "polgrad/policy.hpp"

namespace polgrad {

/// T consecutive transitions. Columns of `obs`/`actions` are time steps.
/// `bootstrap_value[t]` holds V(s_{t+1}) for steps that end a segment without
/// a terminal state (timeouts and the final step of the batch), 0 elsewhere.
struct RolloutBatch {
  Matrix obs;
  Matrix actions;
  std::vector<double> raw_reward;
  std::vector<double> learner_reward;
  std::vector<double> log_prob_old;
  std::vector<double> value_old;
  std::vector<double> bootstrap_value;
  std::vector<int> done;
  std::vector<int> timeout;
  std::vector<double> advantage;
  std::vector<double> return_target;
  std::vector<int> episode_starts;
  /// Raw returns of the episodes that finished inside this batch.
  std::vector<double> episode_returns;
  int action_clip_count = 0;

  int size() const { return static_cast<int>(raw_reward.size()); }

  bool terminal(int t) const { return done[t] != 0 && timeout[t] == 0; }
  bool segment_end(int t) const { return done[t] != 0 || t + 1 == size(); }

  double mean_episode_return() const {
    if (episode_returns.empty()) return std::nan("");
    return std::accumulate(episode_returns.begin(), episode_returns.end(), 0.0) /
           static_cast<double>(episode_returns.size());
  }

  /// Row vector views used by the losses.
  Matrix row(const std::vector<double>& v) const {
    return Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
};

/// Collects exactly T transitions, resetting the environment whenever an
/// episode ends. Episodes may continue across calls.
inline RolloutBatch collect_rollout(const GaussianPolicy& policy, const ValueFunction& value_fn,
                                    EnvPipeline& pipeline, int T, Rng& rng) {
  if (T < 1) throw ConfigError("collect_rollout: T must be >= 1");
  const int od = pipeline.env().obs_dim();
  const int ad = pipeline.env().act_dim();
  if (policy.obs_dim() != od || policy.act_dim() != ad) {
    throw ShapeError("collect_rollout: policy does not match the environment");
  }
  RolloutBatch b;
  b.obs.resize(od, T);
  b.actions.resize(ad, T);
  for (auto* v : {&b.raw_reward, &b.learner_reward, &b.log_prob_old, &b.value_old,
                  &b.bootstrap_value}) {
    v->assign(T, 0.0);
  }
  b.done.assign(T, 0);
  b.timeout.assign(T, 0);

  if (pipeline.needs_reset()) pipeline.reset();
  b.episode_starts.push_back(0);
  for (int t = 0; t < T; ++t) {
    const Vector obs = pipeline.observation();
    b.obs.col(t) = obs;
    b.value_old[t] = value_fn.value(obs);
    ActionSample s = sample_action(policy, obs, rng);
    b.actions.col(t) = s.action;
    b.log_prob_old[t] = s.log_prob;
    const double episode_before = pipeline.episode_raw_return();
    EnvPipeline::Step step = pipeline.step(s.action);
    b.raw_reward[t] = step.raw_reward;
    b.learner_reward[t] = step.learner_reward;
    b.done[t] = step.done ? 1 : 0;
    b.timeout[t] = step.timeout ? 1 : 0;
    if (step.action_clipped) ++b.action_clip_count;
    if (step.done) {
      b.episode_returns.push_back(episode_before + step.raw_reward);
      if (step.timeout) b.bootstrap_value[t] = value_fn.value(step.next_observation);
      pipeline.reset();
      if (t + 1 < T) b.episode_starts.push_back(t + 1);
    } else if (t + 1 == T) {
      b.bootstrap_value[t] = value_fn.value(step.next_observation);
    }
  }
  return b;
}

/// Generalized advantage estimation, backward within each episode segment.
/// Timeouts and the batch end bootstrap from V(s_{t+1}); terminal states
/// bootstrap from 0. Advantages never cross a segment boundary.
inline void compute_gae(RolloutBatch& b, double gamma, double lambda) {
  if (!(gamma >= 0.0 && gamma <= 1.0 && lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("compute_gae: gamma and lambda must lie in [0, 1]");
  }
  const int T = b.size();
  b.advantage.assign(T, 0.0);
  b.return_target.assign(T, 0.0);
  double next_adv = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    double next_value = 0.0;
    if (b.segment_end(t)) {
      next_value = b.terminal(t) ? 0.0 : b.bootstrap_value[t];
      next_adv = 0.0;
    } else {
      next_value = b.value_old[t + 1];
    }
    const double delta = b.learner_reward[t] + gamma * next_value - b.value_old[t];
    const double adv = delta + gamma * lambda * next_adv;
    b.advantage[t] = adv;
    b.return_target[t] = adv + b.value_old[t];
    next_adv = adv;
  }
}

inline constexpr double kAdvantageStdFloor = 1e-8;

inline void normalize_advantages(RolloutBatch& b) {
  const int T = b.size();
  if (T == 0) return;
  const auto [lo, hi] = std::minmax_element(b.advantage.begin(), b.advantage.end());
  if (*lo == *hi) {
    std::fill(b.advantage.begin(), b.advantage.end(), 0.0);
    return;
  }
  double mean = 0.0;
  for (double a : b.advantage) mean += a;
  mean /= T;
  double var = 0.0;
  for (double a : b.advantage) var += (a - mean) * (a - mean);
  var /= T;
  const double sd = std::max(std::sqrt(var), kAdvantageStdFloor);
  for (double& a : b.advantage) a = (a - mean) / sd;
}

// --- batch dump ------------------------------------------------------------
//
// Columns: t, obs_0..obs_{d-1}, act_0..act_{k-1}, raw_reward, learner_reward,
// log_prob_old, value_old, bootstrap_value, done, timeout, advantage,
// return_target. Advantage columns are empty before compute_gae.

inline void write_batch_csv(const std::string& path, const RolloutBatch& b) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  std::vector<std::string> header{"t"};
  for (Eigen::Index i = 0; i < b.obs.rows(); ++i) header.push_back("obs_" + std::to_string(i));
  for (Eigen::Index i = 0; i < b.actions.rows(); ++i) header.push_back("act_" + std::to_string(i));
  for (const char* c : {"raw_reward", "learner_reward", "log_prob_old", "value_old",
                        "bootstrap_value", "done", "timeout", "advantage", "return_target"}) {
    header.emplace_back(c);
  }
  f << csv::join(header) << '\n';
  const bool has_adv = static_cast<int>(b.advantage.size()) == b.size();
  for (int t = 0; t < b.size(); ++t) {
    std::vector<std::string> row{std::to_string(t)};
    for (Eigen::Index i = 0; i < b.obs.rows(); ++i) row.push_back(csv::format_double(b.obs(i, t)));
    for (Eigen::Index i = 0; i < b.actions.rows(); ++i) {
      row.push_back(csv::format_double(b.actions(i, t)));
    }
    row.push_back(csv::format_double(b.raw_reward[t]));
    row.push_back(csv::format_double(b.learner_reward[t]));
    row.push_back(csv::format_double(b.log_prob_old[t]));
    row.push_back(csv::format_double(b.value_old[t]));
    row.push_back(csv::format_double(b.bootstrap_value[t]));
    row.push_back(std::to_string(b.done[t]));
    row.push_back(std::to_string(b.timeout[t]));
    row.push_back(has_adv ? csv::format_double(b.advantage[t]) : "");
    row.push_back(has_adv ? csv::format_double(b.return_target[t]) : "");
    f << csv::join(row) << '\n';
  }
}

inline RolloutBatch read_batch_csv(const std::string& path) {
  csv::Table table(csv::read_file(path));
  int od = 0, ad = 0;
  for (;; ++od) {
    try {
      table.column("obs_" + std::to_string(od));
    } catch (const IoError&) {
      break;
    }
  }
  for (;; ++ad) {
    try {
      table.column("act_" + std::to_string(ad));
    } catch (const IoError&) {
      break;
    }
  }
  const int T = static_cast<int>(table.size());
  RolloutBatch b;
  b.obs.resize(od, T);
  b.actions.resize(ad, T);
  bool has_adv = T > 0 && !table.at(0, "advantage").empty();
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < od; ++i) b.obs(i, t) = table.number(t, "obs_" + std::to_string(i));
    for (int i = 0; i < ad; ++i) b.actions(i, t) = table.number(t, "act_" + std::to_string(i));
    b.raw_reward.push_back(table.number(t, "raw_reward"));
    b.learner_reward.push_back(table.number(t, "learner_reward"));
    b.log_prob_old.push_back(table.number(t, "log_prob_old"));
    b.value_old.push_back(table.number(t, "value_old"));
    b.bootstrap_value.push_back(table.number(t, "bootstrap_value"));
    b.done.push_back(static_cast<int>(table.number(t, "done")));
    b.timeout.push_back(static_cast<int>(table.number(t, "timeout")));
    if (has_adv) {
      b.advantage.push_back(table.number(t, "advantage"));
      b.return_target.push_back(table.number(t, "return_target"));
    }
    if (t == 0 || b.done[t - 1]) b.episode_starts.push_back(t);
  }
  return b;
}

}  // namespace polgrad
