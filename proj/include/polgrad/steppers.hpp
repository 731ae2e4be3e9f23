#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "polgrad/autodiff.hpp"
#include "polgrad/error.hpp"
#include "polgrad/optim.hpp"
#include "polgrad/policy.hpp"
#include "polgrad/random.hpp"
#include "polgrad/rollout.hpp"

namespace polgrad {

enum class Algo { ppo, ppo_m, ppo_noclip, trpo, trpo_plus };

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::ppo: return "ppo";
    case Algo::ppo_m: return "ppo-m";
    case Algo::ppo_noclip: return "ppo-noclip";
    case Algo::trpo: return "trpo";
    case Algo::trpo_plus: return "trpo-plus";
  }
  return "?";
}

inline Algo parse_algo(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  if (s == "ppo") return Algo::ppo;
  if (s == "ppo-m") return Algo::ppo_m;
  if (s == "ppo-noclip") return Algo::ppo_noclip;
  if (s == "trpo") return Algo::trpo;
  if (s == "trpo-plus" || s == "trpo+") return Algo::trpo_plus;
  throw ConfigError("unknown algorithm '" + s + "'");
}

inline bool is_trpo_family(Algo a) { return a == Algo::trpo || a == Algo::trpo_plus; }

/// Clipping constant that never binds; selects PPO without clipping.
inline constexpr double kNoClipEps = 1e32;

struct TrpoParams {
  double delta = 0.01;
  int cg_steps = 10;
  double cg_damping = 0.1;
  int backtrack_steps = 10;
  double fisher_fraction = 0.1;
};

struct StepConfig {
  Algo algo = Algo::ppo;
  double clip_eps = 0.2;
  int policy_epochs = 10;
  int minibatches_per_epoch = 4;
  double entropy_coeff = 0.0;
  bool value_clip = false;
  int value_epochs = 10;
  TrpoParams trpo;
  /// <= 0 disables gradient clipping.
  double grad_clip_norm = -1.0;
  /// Clip policy and value gradients separately instead of jointly.
  bool per_network_grad_clip = false;
};

struct OptimState {
  AdamState policy;
  AdamState value;
};

struct StepReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double surrogate_before = 0.0;
  double surrogate_after = 0.0;
  bool accepted = true;
  /// TRPO: mean KL on the training batch at the moment of acceptance.
  double step_kl = 0.0;
  double step_fraction = 0.0;
  int line_search_steps = 0;
  bool degenerate_curvature = false;
  int grad_clip_events = 0;
  double lr = 0.0;
  double delta = std::numeric_limits<double>::quiet_NaN();
};

/// Columns of a rollout batch gathered for one gradient step.
struct Minibatch {
  Matrix obs;
  Matrix actions;
  Matrix advantage;  // 1 x B
  Matrix log_prob_old;
  Matrix value_old;
  Matrix return_target;

  Eigen::Index size() const { return obs.cols(); }
};

inline Minibatch make_minibatch(const RolloutBatch& b, const std::vector<int>& idx) {
  if (static_cast<int>(b.advantage.size()) != b.size()) {
    throw ContractError("minibatch requested before compute_gae");
  }
  const auto n = static_cast<Eigen::Index>(idx.size());
  Minibatch mb;
  mb.obs.resize(b.obs.rows(), n);
  mb.actions.resize(b.actions.rows(), n);
  mb.advantage.resize(1, n);
  mb.log_prob_old.resize(1, n);
  mb.value_old.resize(1, n);
  mb.return_target.resize(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int t = idx[static_cast<std::size_t>(j)];
    mb.obs.col(j) = b.obs.col(t);
    mb.actions.col(j) = b.actions.col(t);
    mb.advantage(0, j) = b.advantage[t];
    mb.log_prob_old(0, j) = b.log_prob_old[t];
    mb.value_old(0, j) = b.value_old[t];
    mb.return_target(0, j) = b.return_target[t];
  }
  return mb;
}

inline Minibatch full_minibatch(const RolloutBatch& b) {
  std::vector<int> idx(static_cast<std::size_t>(b.size()));
  std::iota(idx.begin(), idx.end(), 0);
  return make_minibatch(b, idx);
}

// --- loss graphs -------------------------------------------------------------

inline ad::Var ratio_graph(const MLPNet& arch, const PolicyVars& vars, const Minibatch& mb) {
  return ad::exp(log_prob_graph(arch, vars, mb.obs, mb.actions) - ad::constant(mb.log_prob_old));
}

/// mean(rho * A); maximized by the learner.
inline ad::Var surrogate_objective(const MLPNet& arch, const PolicyVars& vars,
                                   const Minibatch& mb) {
  return ad::mean(ratio_graph(arch, vars, mb) * ad::constant(mb.advantage));
}

/// Negated clipped objective, minus the entropy bonus:
///   -mean(min(clip(rho, 1-eps, 1+eps) A, rho A)) - c H.
inline ad::Var ppo_surrogate_loss(const MLPNet& arch, const PolicyVars& vars, const Minibatch& mb,
                                  double eps, double entropy_coeff) {
  if (!(eps > 0.0)) throw ConfigError("ppo_surrogate_loss: eps must be positive");
  const ad::Var rho = ratio_graph(arch, vars, mb);
  const ad::Var adv = ad::constant(mb.advantage);
  const ad::Var clipped = ad::clip(rho, 1.0 - eps, 1.0 + eps) * adv;
  const ad::Var objective = ad::mean(ad::minimum(clipped, rho * adv));
  return ad::neg(objective) - ad::scale(entropy_graph(vars), entropy_coeff);
}

/// Squared error to the return targets; the clipped form takes the larger of
/// the plain error and the error of the prediction clipped to within eps of
/// the pre-update prediction.
inline ad::Var value_loss(const MLPNet& arch, const NetVars& vars, const Minibatch& mb, double eps,
                          bool clipped) {
  const ad::Var v = forward(arch, vars, ad::constant(mb.obs));
  const ad::Var target = ad::constant(mb.return_target);
  const ad::Var plain = ad::square(v - target);
  if (!clipped) return ad::mean(plain);
  const Matrix lo = (mb.value_old.array() - eps).matrix();
  const Matrix hi = (mb.value_old.array() + eps).matrix();
  const ad::Var v_clip = ad::clip(v, lo, hi);
  return ad::mean(ad::maximum(plain, ad::square(v_clip - target)));
}

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

inline LossGrad ppo_loss_grad(const GaussianPolicy& policy, const Minibatch& mb, double eps,
                              double entropy_coeff) {
  PolicyVars vars = make_vars(policy);
  ad::Var loss = ppo_surrogate_loss(policy.mean_net(), vars, mb, eps, entropy_coeff);
  return {loss.scalar(), flatten_grads(ad::grad(loss, vars.all()))};
}

/// Value and gradient of the (maximized) surrogate plus entropy bonus.
inline LossGrad surrogate_grad(const GaussianPolicy& policy, const Minibatch& mb,
                               double entropy_coeff = 0.0) {
  PolicyVars vars = make_vars(policy);
  ad::Var obj = surrogate_objective(policy.mean_net(), vars, mb) +
                ad::scale(entropy_graph(vars), entropy_coeff);
  return {obj.scalar(), flatten_grads(ad::grad(obj, vars.all()))};
}

inline LossGrad value_loss_grad(const ValueFunction& vf, const Minibatch& mb, double eps,
                                bool clipped) {
  NetVars vars = make_vars(vf.net());
  ad::Var loss = value_loss(vf.net(), vars, mb, eps, clipped);
  return {loss.scalar(), flatten_grads(ad::grad(loss, vars.all()))};
}

/// Surrogate plus entropy bonus, evaluated without building a graph.
inline double surrogate_value(const GaussianPolicy& policy, const Minibatch& mb,
                              double entropy_coeff = 0.0) {
  const Matrix lp = log_prob_batch(policy, mb.obs, mb.actions);
  const Matrix rho = (lp - mb.log_prob_old).array().exp().matrix();
  return rho.cwiseProduct(mb.advantage).mean() + entropy_coeff * entropy(policy);
}

namespace detail {

inline std::vector<std::vector<int>> shuffled_minibatches(int T, int count, Rng& rng) {
  std::vector<int> perm(static_cast<std::size_t>(T));
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  const int m = std::clamp(count, 1, T);
  std::vector<std::vector<int>> out;
  for (int k = 0; k < m; ++k) {
    const auto lo = static_cast<std::size_t>(static_cast<long>(k) * T / m);
    const auto hi = static_cast<std::size_t>(static_cast<long>(k + 1) * T / m);
    out.emplace_back(perm.begin() + static_cast<long>(lo), perm.begin() + static_cast<long>(hi));
  }
  return out;
}

inline void require_finite(double loss, const char* what) {
  if (!std::isfinite(loss)) throw NumericError(std::string(what) + ": non-finite loss");
}

}  // namespace detail

/// PPO-family update. Policy and value share each shuffled minibatch so the
/// global gradient clip can span both networks; epochs beyond one network's
/// epoch count update only the other.
inline StepReport ppo_update(const RolloutBatch& batch, GaussianPolicy& policy,
                             ValueFunction& value_fn, const StepConfig& cfg, OptimState& opt,
                             int iteration, int total_iterations, Rng& rng) {
  if (is_trpo_family(cfg.algo)) throw ContractError("ppo_update called with a TRPO algorithm");
  const double eps = cfg.algo == Algo::ppo_noclip ? kNoClipEps : cfg.clip_eps;
  StepReport report;
  report.lr = opt.policy.learning_rate(iteration, total_iterations);
  const int T = batch.size();
  const int epochs = std::max(cfg.policy_epochs, cfg.value_epochs);

  Vector pparams = policy.flatten();
  Vector vparams = value_fn.net().flatten();
  for (int e = 0; e < epochs; ++e) {
    const bool do_policy = e < cfg.policy_epochs;
    const bool do_value = e < cfg.value_epochs;
    double p_sum = 0.0, v_sum = 0.0;
    int n_mb = 0;
    for (const auto& idx : detail::shuffled_minibatches(T, cfg.minibatches_per_epoch, rng)) {
      const Minibatch mb = make_minibatch(batch, idx);
      LossGrad pg, vg;
      if (do_policy) {
        pg = ppo_loss_grad(policy, mb, eps, cfg.entropy_coeff);
        detail::require_finite(pg.loss, "policy loss");
        p_sum += pg.loss;
      }
      if (do_value) {
        vg = value_loss_grad(value_fn, mb, cfg.clip_eps, cfg.value_clip);
        detail::require_finite(vg.loss, "value loss");
        v_sum += vg.loss;
      }
      ++n_mb;
      if (cfg.grad_clip_norm > 0.0) {
        if (cfg.per_network_grad_clip) {
          if (do_policy && clip_global_norm({&pg.grad}, cfg.grad_clip_norm)) ++report.grad_clip_events;
          if (do_value && clip_global_norm({&vg.grad}, cfg.grad_clip_norm)) ++report.grad_clip_events;
        } else {
          std::vector<Vector*> gs;
          if (do_policy) gs.push_back(&pg.grad);
          if (do_value) gs.push_back(&vg.grad);
          if (clip_global_norm(gs, cfg.grad_clip_norm)) ++report.grad_clip_events;
        }
      }
      if (do_policy) {
        adam_step(opt.policy, pparams, pg.grad, iteration, total_iterations);
        policy.unflatten(pparams);
      }
      if (do_value) {
        adam_step(opt.value, vparams, vg.grad, iteration, total_iterations);
        value_fn.net().unflatten(vparams);
      }
    }
    if (do_policy && n_mb) report.policy_loss = p_sum / n_mb;
    if (do_value && n_mb) report.value_loss = v_sum / n_mb;
  }
  return report;
}

/// Value regression used by the TRPO family: `value_epochs` epochs of
/// shuffled minibatch Adam steps. Returns the mean loss of the last epoch.
inline double fit_value(const RolloutBatch& batch, ValueFunction& value_fn, const StepConfig& cfg,
                        AdamState& adam, int iteration, int total_iterations, Rng& rng,
                        int* clip_events = nullptr) {
  Vector params = value_fn.net().flatten();
  double last = 0.0;
  for (int e = 0; e < cfg.value_epochs; ++e) {
    double sum = 0.0;
    int n = 0;
    for (const auto& idx :
         detail::shuffled_minibatches(batch.size(), cfg.minibatches_per_epoch, rng)) {
      const Minibatch mb = make_minibatch(batch, idx);
      LossGrad vg = value_loss_grad(value_fn, mb, cfg.clip_eps, cfg.value_clip);
      detail::require_finite(vg.loss, "value loss");
      if (cfg.grad_clip_norm > 0.0 && clip_global_norm({&vg.grad}, cfg.grad_clip_norm) &&
          clip_events) {
        ++*clip_events;
      }
      adam_step(adam, params, vg.grad, iteration, total_iterations);
      value_fn.net().unflatten(params);
      sum += vg.loss;
      ++n;
    }
    if (n) last = sum / n;
  }
  return last;
}

/// Natural-gradient step on the surrogate under the mean-KL constraint
/// `kl_target`, followed by backtracking that halves the step until the
/// surrogate improves and the training-batch mean KL is within the target.
inline StepReport trpo_step(const RolloutBatch& batch, GaussianPolicy& policy,
                            ValueFunction& value_fn, const StepConfig& cfg, double kl_target,
                            OptimState& opt, int iteration, int total_iterations, Rng& rng) {
  if (!is_trpo_family(cfg.algo)) throw ContractError("trpo_step called with a PPO algorithm");
  if (!(kl_target > 0.0)) throw ConfigError("trpo_step: KL target must be positive");
  StepReport report;
  report.delta = kl_target;
  report.lr = opt.value.learning_rate(iteration, total_iterations);
  report.accepted = false;

  const GaussianPolicy old = policy;
  const Minibatch full = full_minibatch(batch);
  const LossGrad g = surrogate_grad(old, full, cfg.entropy_coeff);
  detail::require_finite(g.loss, "surrogate");
  report.surrogate_before = g.loss;
  report.surrogate_after = g.loss;
  report.policy_loss = -g.loss;

  if (g.grad.squaredNorm() > 0.0) {
    const int T = batch.size();
    const int n_fisher =
        std::clamp(static_cast<int>(std::lround(cfg.trpo.fisher_fraction * T)), 1, T);
    std::vector<int> cols(static_cast<std::size_t>(T));
    std::iota(cols.begin(), cols.end(), 0);
    rng.shuffle(cols);
    Matrix fisher_obs(batch.obs.rows(), n_fisher);
    for (int j = 0; j < n_fisher; ++j) fisher_obs.col(j) = batch.obs.col(cols[j]);

    const LinearOperator fvp = [&](const Vector& v) {
      return fisher_vector_product(old, fisher_obs, v, cfg.trpo.cg_damping);
    };
    const Vector x = cg_solve(fvp, g.grad, cfg.trpo.cg_steps);
    const double shs = x.dot(fvp(x));
    if (!(shs > 0.0) || !std::isfinite(shs)) {
      report.degenerate_curvature = true;
    } else {
      const Vector full_step = std::sqrt(2.0 * kl_target / shs) * x;
      const Vector theta0 = old.flatten();
      GaussianPolicy candidate = old;
      double frac = 1.0;
      for (int k = 0; k < cfg.trpo.backtrack_steps; ++k, frac *= 0.5) {
        candidate.unflatten(theta0 + frac * full_step);
        const double obj = surrogate_value(candidate, full, cfg.entropy_coeff);
        const double kl = gaussian_kl(candidate, old, batch.obs).mean;
        report.line_search_steps = k + 1;
        if (std::isfinite(obj) && obj - g.loss > 0.0 && kl <= kl_target) {
          policy = candidate;
          report.accepted = true;
          report.step_kl = kl;
          report.step_fraction = frac;
          report.surrogate_after = obj;
          report.policy_loss = -obj;
          break;
        }
      }
    }
  }

  report.value_loss = fit_value(batch, value_fn, cfg, opt.value, iteration, total_iterations, rng,
                                &report.grad_clip_events);
  return report;
}

}  // namespace polgrad
