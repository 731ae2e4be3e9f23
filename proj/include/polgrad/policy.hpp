#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "polgrad/autodiff.hpp"
#include "polgrad/nn.hpp"
#include "polgrad/random.hpp"

namespace polgrad {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi) / 2

/// Ratios are capped here instead of overflowing to infinity.
inline constexpr double kMaxRatio = 1e30;

/// Diagonal Gaussian over actions: mean from an MLP, state-independent log std.
class GaussianPolicy {
 public:
  GaussianPolicy() = default;
  GaussianPolicy(MLPNet mean_net, Vector log_std)
      : mean_net_(std::move(mean_net)), log_std_(std::move(log_std)) {
    if (log_std_.size() != mean_net_.output_dim()) {
      throw ShapeError("GaussianPolicy: log_std length must equal the action dimension");
    }
  }

  const MLPNet& mean_net() const { return mean_net_; }
  MLPNet& mean_net() { return mean_net_; }
  const Vector& log_std() const { return log_std_; }
  Vector& log_std() { return log_std_; }

  int obs_dim() const { return mean_net_.input_dim(); }
  int act_dim() const { return mean_net_.output_dim(); }
  Vector std_dev() const { return log_std_.array().exp().matrix(); }

  std::size_t param_count() const { return mean_net_.param_count() + log_std_.size(); }

  /// Mean-network parameters followed by log std.
  ParamVector flatten() const {
    ParamVector out(static_cast<Eigen::Index>(param_count()));
    const auto n = static_cast<Eigen::Index>(mean_net_.param_count());
    out.head(n) = mean_net_.flatten();
    out.tail(log_std_.size()) = log_std_;
    return out;
  }

  void unflatten(const ParamVector& v) {
    if (static_cast<std::size_t>(v.size()) != param_count()) {
      throw ShapeError("GaussianPolicy::unflatten: wrong parameter count");
    }
    const auto n = static_cast<Eigen::Index>(mean_net_.param_count());
    mean_net_.unflatten(v.head(n));
    log_std_ = v.tail(log_std_.size());
  }

  Vector mean(const Vector& obs) const { return mean_net_.forward(obs); }
  Matrix mean_batch(const Matrix& obs) const { return mean_net_.forward_batch(obs); }

 private:
  MLPNet mean_net_;
  Vector log_std_;
};

class ValueFunction {
 public:
  ValueFunction() = default;
  explicit ValueFunction(MLPNet net) : net_(std::move(net)) {
    if (net_.output_dim() != 1) throw ShapeError("ValueFunction: network output must be scalar");
  }

  const MLPNet& net() const { return net_; }
  MLPNet& net() { return net_; }

  double value(const Vector& obs) const { return net_.forward(obs)[0]; }
  /// 1 x B row of values.
  Matrix values(const Matrix& obs) const { return net_.forward_batch(obs); }

 private:
  MLPNet net_;
};

/// Log density of a diagonal Gaussian.
inline double gaussian_log_density(const Vector& mean, const Vector& log_std, const Vector& x) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const double z = (x[i] - mean[i]) / std::exp(log_std[i]);
    lp += -0.5 * z * z - log_std[i] - kHalfLog2Pi;
  }
  return lp;
}

inline double log_prob(const GaussianPolicy& policy, const Vector& obs, const Vector& action) {
  if (action.size() != policy.act_dim()) throw ShapeError("log_prob: action dimension mismatch");
  return gaussian_log_density(policy.mean(obs), policy.log_std(), action);
}

/// Log densities for a batch; columns are samples. Returns 1 x B.
inline Matrix log_prob_batch(const GaussianPolicy& policy, const Matrix& obs,
                             const Matrix& actions) {
  const Matrix mu = policy.mean_batch(obs);
  const Vector inv_std = (-policy.log_std().array()).exp().matrix();
  const Matrix z = (actions - mu).array().colwise() * inv_std.array();
  Matrix out = -0.5 * z.array().square().colwise().sum().matrix();
  out.array() -= policy.log_std().sum() + kHalfLog2Pi * static_cast<double>(policy.act_dim());
  return out;
}

struct ActionSample {
  Vector action;
  double log_prob = 0.0;
};

inline ActionSample sample_action(const GaussianPolicy& policy, const Vector& obs, Rng& rng) {
  const Vector mu = policy.mean(obs);
  if (!mu.allFinite()) throw NumericError("sample_action: non-finite policy mean");
  Vector a(mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    a[i] = mu[i] + std::exp(policy.log_std()[i]) * rng.normal();
  }
  return {a, gaussian_log_density(mu, policy.log_std(), a)};
}

struct Ratio {
  double value = 1.0;
  bool overflow = false;
};

inline Ratio ratio_from_log(double log_new, double log_old) {
  const double r = std::exp(log_new - log_old);
  if (!(r <= kMaxRatio)) return {kMaxRatio, true};
  return {r, false};
}

/// pi_new(a|s) / pi_old(a|s).
inline Ratio prob_ratio(const GaussianPolicy& policy_new, const GaussianPolicy& policy_old,
                        const Vector& obs, const Vector& action) {
  return ratio_from_log(log_prob(policy_new, obs, action), log_prob(policy_old, obs, action));
}

struct KlStats {
  double mean = 0.0;
  double max = 0.0;
};

/// Per-state KL(new || old) for every column of `obs`. Returns 1 x B.
inline Matrix gaussian_kl_per_state(const GaussianPolicy& policy_new,
                                    const GaussianPolicy& policy_old, const Matrix& obs) {
  const Matrix mu_n = policy_new.mean_batch(obs);
  const Matrix mu_o = policy_old.mean_batch(obs);
  const Vector& ls_n = policy_new.log_std();
  const Vector& ls_o = policy_old.log_std();
  const Vector inv_2var_o = (0.5 * (-2.0 * ls_o.array()).exp()).matrix();
  // log(s_o/s_n) + (s_n^2/s_o^2 - 1)/2 per dimension; exactly 0 when equal.
  double const_part = 0.0;
  for (Eigen::Index i = 0; i < ls_n.size(); ++i) {
    const double d = ls_n(i) - ls_o(i);
    const_part += -d + 0.5 * std::expm1(2.0 * d);
  }
  Matrix out =
      ((mu_n - mu_o).array().square().colwise() * inv_2var_o.array()).colwise().sum().matrix();
  out.array() += const_part;
  return out;
}

inline KlStats gaussian_kl(const GaussianPolicy& policy_new, const GaussianPolicy& policy_old,
                           const Matrix& obs_batch) {
  if (obs_batch.cols() == 0) throw ContractError("gaussian_kl: empty observation batch");
  const Matrix kl = gaussian_kl_per_state(policy_new, policy_old, obs_batch);
  return {kl.mean(), kl.maxCoeff()};
}

inline double entropy(const GaussianPolicy& policy) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < policy.log_std().size(); ++i) {
    h += 0.5 + kHalfLog2Pi + policy.log_std()[i];
  }
  return h;
}

// --- differentiable forms -------------------------------------------------

struct PolicyVars {
  NetVars net;
  ad::Var log_std;

  std::vector<ad::Var> all() const {
    auto out = net.all();
    out.push_back(log_std);
    return out;
  }
};

inline PolicyVars make_vars(const GaussianPolicy& policy, bool trainable = true) {
  return {make_vars(policy.mean_net(), trainable),
          trainable ? ad::variable(Matrix(policy.log_std()))
                    : ad::constant(Matrix(policy.log_std()))};
}

/// 1 x B row of log densities of `actions` under the policy graph.
inline ad::Var log_prob_graph(const MLPNet& arch, const PolicyVars& vars, const Matrix& obs,
                              const Matrix& actions) {
  const auto batch = obs.cols();
  ad::Var mu = forward(arch, vars.net, ad::constant(obs));
  ad::Var ls = ad::broadcast_cols(vars.log_std, batch);
  ad::Var z = (ad::constant(actions) - mu) / ad::exp(ls);
  ad::Var per_dim = ad::scale(ad::square(z), -0.5) - ls;
  return ad::add_scalar(ad::sum_rows(per_dim),
                        -kHalfLog2Pi * static_cast<double>(arch.output_dim()));
}

inline ad::Var entropy_graph(const PolicyVars& vars) {
  return ad::add_scalar(ad::sum(vars.log_std),
                        (0.5 + kHalfLog2Pi) * static_cast<double>(vars.log_std.rows()));
}

/// Mean over the columns of `obs` of KL(pi_vars || old).
inline ad::Var mean_kl_graph(const MLPNet& arch, const PolicyVars& vars,
                             const GaussianPolicy& old, const Matrix& obs) {
  const auto batch = obs.cols();
  ad::Var mu_n = forward(arch, vars.net, ad::constant(obs));
  const Matrix mu_o = old.mean_batch(obs);
  ad::Var ls_n = ad::broadcast_cols(vars.log_std, batch);
  const Matrix ls_o = old.log_std().replicate(1, batch);
  const Matrix inv_2var_o = (0.5 * (-2.0 * ls_o.array()).exp()).matrix();
  ad::Var var_n = ad::exp(ad::scale(ls_n, 2.0));
  ad::Var quad = (var_n + ad::square(mu_n - ad::constant(mu_o))) * ad::constant(inv_2var_o);
  ad::Var per_dim = ad::add_scalar(ad::constant(ls_o) - ls_n + quad, -0.5);
  return ad::scale(ad::sum(per_dim), 1.0 / static_cast<double>(batch));
}

}  // namespace polgrad
