#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "polgrad/autodiff.hpp"
#include "polgrad/error.hpp"
#include "polgrad/policy.hpp"

namespace polgrad {

enum class LrSchedule { constant, linear_anneal };

struct AdamState {
  long t = 0;
  Vector m;
  Vector v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 3e-4;
  LrSchedule schedule = LrSchedule::constant;

  AdamState() = default;
  AdamState(std::size_t n, double lr, LrSchedule sched)
      : m(Vector::Zero(static_cast<Eigen::Index>(n))),
        v(Vector::Zero(static_cast<Eigen::Index>(n))),
        base_lr(lr),
        schedule(sched) {}

  double learning_rate(int iteration, int total_iterations) const {
    if (schedule == LrSchedule::constant || total_iterations <= 0) return base_lr;
    return base_lr * (1.0 - static_cast<double>(iteration) / static_cast<double>(total_iterations));
  }
};

/// One bias-corrected Adam step, in place. `iteration`/`total_iterations`
/// drive the learning-rate schedule. A non-finite gradient throws before any
/// state is modified.
inline void adam_step(AdamState& s, Vector& params, const Vector& grad, int iteration,
                      int total_iterations) {
  if (grad.size() != params.size() || s.m.size() != params.size()) {
    throw ShapeError("adam_step: size mismatch");
  }
  if (!grad.allFinite()) throw NumericError("adam_step: non-finite gradient");
  const double lr = s.learning_rate(iteration, total_iterations);
  s.t += 1;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  params.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

enum class KlScheduleMode { constant, linear_decay };

struct KLSchedule {
  double base_delta = 0.01;
  KlScheduleMode mode = KlScheduleMode::constant;
  int total_iterations = 1;
};

inline constexpr double kKlDecayFloor = 0.05;

inline double kl_schedule(const KLSchedule& s, int iteration) {
  if (s.mode == KlScheduleMode::constant) return s.base_delta;
  const double frac =
      1.0 - static_cast<double>(iteration) / static_cast<double>(std::max(1, s.total_iterations));
  return s.base_delta * std::max(frac, kKlDecayFloor);
}

/// Rescales all gradients together so that the l2 norm of their
/// concatenation is at most `max_norm`. Returns true when scaling applied.
inline bool clip_global_norm(const std::vector<Vector*>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const Vector* g : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return false;
  const double factor = max_norm / norm;
  for (Vector* g : grads) *g *= factor;
  return true;
}

using LinearOperator = std::function<Vector(const Vector&)>;

/// Conjugate gradient from x0 = 0. Stops after `steps` iterations or when the
/// residual norm drops to `tol`; returns the iterate with the smallest
/// residual seen.
inline Vector cg_solve(const LinearOperator& apply, const Vector& b, int steps, double tol = 1e-10) {
  Vector x = Vector::Zero(b.size());
  Vector r = b;
  Vector p = r;
  double rr = r.squaredNorm();
  Vector best = x;
  double best_rr = rr;
  for (int k = 0; k < steps && std::sqrt(rr) > tol; ++k) {
    const Vector ap = apply(p);
    if (!ap.allFinite()) throw NumericError("cg_solve: operator produced NaN");
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) break;
    const double alpha = rr / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double rr_new = r.squaredNorm();
    if (rr_new < best_rr) {
      best_rr = rr_new;
      best = x;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return best;
}

/// (H + damping I) v, where H is the Hessian of the mean KL(pi_theta || pi_old)
/// over `obs` at theta = theta_old, obtained by differentiating the
/// directional derivative <grad KL, v>.
inline Vector fisher_vector_product(const GaussianPolicy& policy, const Matrix& obs, const Vector& v,
                                    double damping) {
  if (static_cast<std::size_t>(v.size()) != policy.param_count()) {
    throw ShapeError("fisher_vector_product: vector length mismatch");
  }
  PolicyVars vars = make_vars(policy);
  const auto leaves = vars.all();
  ad::Var kl = mean_kl_graph(policy.mean_net(), vars, policy, obs);
  std::vector<ad::Var> g = ad::grad(kl, leaves, /*create_graph=*/true);

  // Unflatten v to leaf shapes (row-major within each matrix).
  ad::Var dot = ad::constant(0.0);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto rows = leaves[i].rows(), cols = leaves[i].cols();
    Matrix vi(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) vi(r, c) = v[k++];
    }
    dot = dot + ad::sum(g[i] * ad::constant(std::move(vi)));
  }
  Vector hv = flatten_grads(ad::grad(dot, leaves));
  return hv + damping * v;
}

}  // namespace polgrad
