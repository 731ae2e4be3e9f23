#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>

#include "polgrad/error.hpp"
#include "polgrad/nn.hpp"
#include "polgrad/random.hpp"

namespace polgrad {

enum class EnvId { pendulum, pointgoal };

inline std::string to_string(EnvId id) {
  return id == EnvId::pendulum ? "pendulum" : "pointgoal";
}

inline EnvId parse_env_id(const std::string& s) {
  if (s == "pendulum") return EnvId::pendulum;
  if (s == "pointgoal") return EnvId::pointgoal;
  throw ConfigError("unknown environment '" + s + "' (expected pendulum or pointgoal)");
}

struct EnvState {
  Vector observation;
  double reward = 0.0;
  bool done = false;
  bool timeout = false;  // horizon reached; implies done
  int step_index = 0;
  bool action_clipped = false;
};

/// Native continuous-control tasks.
///
/// pendulum: obs [cos th, sin th, thdot], torque in [-2, 2], horizon 200.
/// pointgoal: obs [p, v] in R^4, force in [-1, 1]^2, horizon 100.
/// Neither task has a failure state; episodes end only at the horizon.
class Environment {
 public:
  static constexpr double kDt = 0.05;
  static constexpr double kGravity = 10.0;
  static constexpr double kMass = 1.0;
  static constexpr double kLength = 1.0;
  static constexpr double kMaxSpeed = 8.0;
  static constexpr double kMaxTorque = 2.0;
  static constexpr double kDamping = 0.95;

  Environment(EnvId id, std::uint64_t seed) : id_(id), rng_(seed) {}

  EnvId id() const { return id_; }
  int obs_dim() const { return id_ == EnvId::pendulum ? 3 : 4; }
  int act_dim() const { return id_ == EnvId::pendulum ? 1 : 2; }
  int horizon() const { return id_ == EnvId::pendulum ? 200 : 100; }
  double action_bound() const { return id_ == EnvId::pendulum ? kMaxTorque : 1.0; }

  EnvState reset() {
    step_ = 0;
    done_ = false;
    if (id_ == EnvId::pendulum) {
      theta_ = rng_.uniform(-std::numbers::pi, std::numbers::pi);
      theta_dot_ = rng_.uniform(-1.0, 1.0);
    } else {
      pos_ = {rng_.uniform(-1.0, 1.0), rng_.uniform(-1.0, 1.0)};
      vel_.setZero();
    }
    started_ = true;
    return {observation(), 0.0, false, false, 0, false};
  }

  EnvState step(const Vector& action) {
    if (!started_ || done_) throw ContractError("env_step called before reset or after done");
    if (action.size() != act_dim()) throw ShapeError("env_step: action dimension mismatch");
    const double bound = action_bound();
    Vector a = action.cwiseMax(-bound).cwiseMin(bound);
    const bool clipped = a != action;
    double reward = 0.0;
    if (id_ == EnvId::pendulum) {
      const double u = a[0];
      const double th = wrap_angle(theta_);
      reward = -(th * th + 0.1 * theta_dot_ * theta_dot_ + 0.001 * u * u);
      double thd = theta_dot_ + (3.0 * kGravity / (2.0 * kLength)) * std::sin(theta_) * kDt +
                   (3.0 / (kMass * kLength * kLength)) * u * kDt;
      thd = std::clamp(thd, -kMaxSpeed, kMaxSpeed);
      theta_ = theta_ + thd * kDt;
      theta_dot_ = thd;
    } else {
      const Eigen::Vector2d f(a[0], a[1]);
      vel_ = kDamping * vel_ + kDt * f;
      pos_ = pos_ + kDt * vel_;
      reward = -pos_.norm() - 0.01 * f.squaredNorm();
    }
    ++step_;
    const bool timeout = step_ >= horizon();
    done_ = timeout;
    return {observation(), reward, done_, timeout, step_, clipped};
  }

  bool done() const { return done_; }

  void set_pendulum_state(double theta, double theta_dot) {
    theta_ = theta;
    theta_dot_ = theta_dot;
  }
  void set_point_state(const Eigen::Vector2d& p, const Eigen::Vector2d& v) {
    pos_ = p;
    vel_ = v;
  }
  double theta() const { return theta_; }
  double theta_dot() const { return theta_dot_; }

  static double wrap_angle(double x) {
    const double two_pi = 2.0 * std::numbers::pi;
    double y = std::fmod(x + std::numbers::pi, two_pi);
    if (y < 0.0) y += two_pi;
    return y - std::numbers::pi;
  }

 private:
  Vector observation() const {
    Vector o(obs_dim());
    if (id_ == EnvId::pendulum) {
      o << std::cos(theta_), std::sin(theta_), theta_dot_;
    } else {
      o << pos_[0], pos_[1], vel_[0], vel_[1];
    }
    return o;
  }

  EnvId id_;
  Rng rng_;
  int step_ = 0;
  bool done_ = false;
  bool started_ = false;
  double theta_ = 0.0;
  double theta_dot_ = 0.0;
  Eigen::Vector2d pos_ = Eigen::Vector2d::Zero();
  Eigen::Vector2d vel_ = Eigen::Vector2d::Zero();
};

/// Welford accumulator over fixed-dimension vectors. Variance uses the
/// population convention m2 / count.
class RunningStats {
 public:
  RunningStats() = default;
  explicit RunningStats(int dim) : mean_(Vector::Zero(dim)), m2_(Vector::Zero(dim)) {}

  void update(const Vector& x) {
    if (x.size() != mean_.size()) throw ShapeError("RunningStats: dimension mismatch");
    ++count_;
    const Vector delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta.cwiseProduct(x - mean_);
  }

  void update(double x) { update(Vector::Constant(1, x)); }

  /// Chan et al. parallel combination.
  void merge(const RunningStats& other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    const auto n = static_cast<double>(count_ + other.count_);
    const Vector delta = other.mean_ - mean_;
    mean_ += delta * (static_cast<double>(other.count_) / n);
    m2_ += other.m2_ + delta.cwiseProduct(delta) *
                           (static_cast<double>(count_) * static_cast<double>(other.count_) / n);
    count_ += other.count_;
  }

  std::int64_t count() const { return count_; }
  int dim() const { return static_cast<int>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  const Vector& m2() const { return m2_; }
  Vector variance() const {
    if (count_ == 0) return Vector::Zero(mean_.size());
    return m2_ / static_cast<double>(count_);
  }
  Vector std_dev() const { return variance().cwiseMax(0.0).cwiseSqrt(); }

 private:
  std::int64_t count_ = 0;
  Vector mean_;
  Vector m2_;
};

struct Range {
  double lo = -10.0;
  double hi = 10.0;
};

enum class RewardScaling { none, returns, rewards };

inline std::string to_string(RewardScaling m) {
  switch (m) {
    case RewardScaling::none: return "none";
    case RewardScaling::returns: return "returns";
    case RewardScaling::rewards: return "rewards";
  }
  return "?";
}

inline RewardScaling parse_reward_scaling(const std::string& s) {
  if (s == "none") return RewardScaling::none;
  if (s == "returns") return RewardScaling::returns;
  if (s == "rewards") return RewardScaling::rewards;
  throw ConfigError("unknown reward normalization '" + s + "'");
}

struct PipelineConfig {
  RewardScaling reward_scaling_mode = RewardScaling::none;
  std::optional<Range> reward_clip;
  bool obs_normalize = false;
  std::optional<Range> obs_clip;
  double gamma = 0.99;
  bool reset_return_on_done = true;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("pipeline gamma must be in (0, 1)");
    if (reward_clip && !(reward_clip->lo < reward_clip->hi)) {
      throw ConfigError("reward clip range needs lo < hi");
    }
    if (obs_clip && !(obs_clip->lo < obs_clip->hi)) {
      throw ConfigError("observation clip range needs lo < hi");
    }
  }
};

struct ScaledReward {
  double scaled = 0.0;
  double running_return = 0.0;
};

namespace detail {
inline double divide_by_std(const RunningStats& stats, double r) {
  if (stats.count() < 2) return r;
  const double sd = stats.std_dev()[0];
  if (!(sd > 0.0)) return r;
  return r / sd;
}
}  // namespace detail

/// Discounted-return scaling: R_t = gamma R_{t-1} + r_t is added to `stats`
/// and r_t is divided by the running std of R (the mean is not subtracted).
/// With fewer than two samples or zero spread the reward passes unscaled.
inline ScaledReward scale_reward(RunningStats& stats, double running_return, double reward,
                                 double gamma) {
  const double ret = gamma * running_return + reward;
  stats.update(ret);
  return {detail::divide_by_std(stats, reward), ret};
}

/// Variant that tracks the raw rewards instead of the discounted sum.
inline double scale_reward_by_rewards(RunningStats& stats, double reward) {
  stats.update(reward);
  return detail::divide_by_std(stats, reward);
}

inline double clip_reward(double r, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip_reward: lo must be < hi");
  return std::clamp(r, lo, hi);
}

inline Vector clip_obs(const Vector& obs, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip_obs: lo must be < hi");
  return obs.cwiseMax(lo).cwiseMin(hi);
}

inline constexpr double kObsStdFloor = 1e-8;

/// Updates `stats` with `obs`, then standardizes it.
inline Vector normalize_obs(RunningStats& stats, const Vector& obs) {
  stats.update(obs);
  return (obs - stats.mean()).cwiseQuotient(stats.std_dev().cwiseMax(kObsStdFloor));
}

/// Standardizes without touching the statistics.
inline Vector normalize_obs_frozen(const RunningStats& stats, const Vector& obs) {
  return (obs - stats.mean()).cwiseQuotient(stats.std_dev().cwiseMax(kObsStdFloor));
}

class RewardScaler {
 public:
  RewardScaler() = default;
  RewardScaler(RewardScaling mode, double gamma, bool reset_on_done)
      : mode_(mode), gamma_(gamma), reset_on_done_(reset_on_done), stats_(1) {}

  double operator()(double r) {
    switch (mode_) {
      case RewardScaling::none: return r;
      case RewardScaling::returns: {
        auto s = scale_reward(stats_, running_return_, r, gamma_);
        running_return_ = s.running_return;
        return s.scaled;
      }
      case RewardScaling::rewards: return scale_reward_by_rewards(stats_, r);
    }
    return r;
  }

  void end_episode() {
    if (reset_on_done_) running_return_ = 0.0;
  }

  const RunningStats& stats() const { return stats_; }

 private:
  RewardScaling mode_ = RewardScaling::none;
  double gamma_ = 0.99;
  bool reset_on_done_ = true;
  RunningStats stats_{1};
  double running_return_ = 0.0;
};

/// An environment with the observation and reward transforms in fixed order:
///   raw obs    -> normalize -> clip -> agent
///   raw reward -> scale     -> clip -> learner
/// A frozen pipeline applies the transforms without updating any statistics.
class EnvPipeline {
 public:
  struct Step {
    Vector next_observation;  // transformed
    double raw_reward = 0.0;
    double learner_reward = 0.0;
    bool done = false;
    bool timeout = false;
    bool action_clipped = false;
  };

  EnvPipeline(EnvId id, std::uint64_t env_seed, PipelineConfig config)
      : env_(id, env_seed),
        config_(config),
        obs_stats_(env_.obs_dim()),
        reward_scaler_(config.reward_scaling_mode, config.gamma, config.reset_return_on_done) {
    config_.validate();
  }

  const Environment& env() const { return env_; }
  const PipelineConfig& config() const { return config_; }
  const RunningStats& obs_stats() const { return obs_stats_; }
  const RewardScaler& reward_scaler() const { return reward_scaler_; }
  bool frozen() const { return frozen_; }

  /// Transformed observation the agent should act on.
  const Vector& observation() const { return obs_; }
  double episode_raw_return() const { return episode_return_; }
  bool needs_reset() const { return !started_ || env_.done(); }

  void reset() {
    EnvState s = env_.reset();
    obs_ = transform_obs(s.observation, !frozen_);
    episode_return_ = 0.0;
    started_ = true;
  }

  /// The observation following a terminal step is transformed without
  /// updating statistics; it only serves as a bootstrap input.
  Step step(const Vector& action) {
    if (!started_) throw ContractError("EnvPipeline::step before reset");
    EnvState s = env_.step(action);
    Step out;
    out.raw_reward = s.reward;
    out.done = s.done;
    out.timeout = s.timeout;
    out.action_clipped = s.action_clipped;
    episode_return_ += s.reward;
    double r = frozen_ ? s.reward : reward_scaler_(s.reward);
    if (config_.reward_clip) r = clip_reward(r, config_.reward_clip->lo, config_.reward_clip->hi);
    out.learner_reward = r;
    out.next_observation = transform_obs(s.observation, !frozen_ && !s.done);
    if (s.done) reward_scaler_.end_episode();
    obs_ = out.next_observation;
    return out;
  }

  /// Same statistics, frozen, wrapped around a fresh environment.
  EnvPipeline frozen_copy(std::uint64_t env_seed) const {
    EnvPipeline copy(env_.id(), env_seed, config_);
    copy.obs_stats_ = obs_stats_;
    copy.reward_scaler_ = reward_scaler_;
    copy.frozen_ = true;
    return copy;
  }

  Vector transform_obs(const Vector& raw, bool update) {
    Vector o = raw;
    if (config_.obs_normalize) {
      o = update ? normalize_obs(obs_stats_, raw) : normalize_obs_frozen(obs_stats_, raw);
    }
    if (config_.obs_clip) o = clip_obs(o, config_.obs_clip->lo, config_.obs_clip->hi);
    return o;
  }

 private:
  Environment env_;
  PipelineConfig config_;
  RunningStats obs_stats_;
  RewardScaler reward_scaler_;
  Vector obs_;
  double episode_return_ = 0.0;
  bool started_ = false;
  bool frozen_ = false;
};

}  // namespace polgrad
