#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "polgrad/config.hpp"
#include "polgrad/error.hpp"
#include "polgrad/random.hpp"

namespace polgrad {

/// Empirical percentile, linear interpolation between order statistics.
/// `q` in [0, 1].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double median_of(const std::vector<double>& v) { return percentile(v, 0.5); }

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean.
inline Interval bootstrap_ci(const std::vector<double>& values, int n_resamples = 1000,
                             double level = 0.95, std::uint64_t seed = 0) {
  if (values.empty()) throw ContractError("bootstrap_ci needs at least one value");
  if (n_resamples < 1) throw ConfigError("bootstrap_ci: n_resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must be in (0, 1)");
  Rng rng(seed);
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(n_resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  const double tail = (1.0 - level) / 2.0;
  return {percentile(means, tail), percentile(means, 1.0 - tail)};
}

struct AaiAcli {
  double aai = 0.0;
  double acli = 0.0;
};

inline AaiAcli compute_aai_acli(double ppo, double ppo_m, double trpo, double trpo_plus) {
  for (double x : {ppo, ppo_m, trpo, trpo_plus}) {
    if (!std::isfinite(x)) throw ContractError("compute_aai_acli: inputs must be finite");
  }
  return {std::max(std::abs(ppo - trpo_plus), std::abs(ppo_m - trpo)),
          std::max(std::abs(ppo - ppo_m), std::abs(trpo_plus - trpo))};
}

/// Mean over seeds; any non-finite score (diverged run) makes the mean -inf.
inline double seed_mean_score(const std::vector<double>& scores) {
  if (scores.empty()) return -std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (double x : scores) {
    if (!std::isfinite(x)) return -std::numeric_limits<double>::infinity();
    s += x;
  }
  return s / static_cast<double>(scores.size());
}

/// Step size (lr or delta) with the best seed-mean score; ties go to the
/// smaller step.
inline double select_best_step(const std::map<double, std::vector<double>>& scores_by_step) {
  if (scores_by_step.empty()) throw ConfigError("grid search needs at least one step size");
  double best_step = scores_by_step.begin()->first;
  double best = seed_mean_score(scores_by_step.begin()->second);
  for (const auto& [step, scores] : scores_by_step) {
    const double m = seed_mean_score(scores);
    if (m > best) {
      best = m;
      best_step = step;
    }
  }
  return best_step;
}

/// All 2^k on/off combinations of `subset` over `base`. Bit i of the index
/// drives subset[i].
inline std::vector<AlgoConfig> enumerate_ablation_configs(const AlgoConfig& base,
                                                          const std::vector<std::string>& subset) {
  if (subset.empty()) throw ConfigError("ablation subset must be non-empty");
  if (subset.size() > 16) throw ConfigError("ablation subset too large");
  for (std::size_t i = 0; i < subset.size(); ++i) {
    if (std::find(kOptimizationNames.begin(), kOptimizationNames.end(), subset[i]) ==
        kOptimizationNames.end()) {
      throw ConfigError("unknown optimization '" + subset[i] + "'");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (subset[i] == subset[j]) throw ConfigError("duplicate optimization '" + subset[i] + "'");
    }
  }
  std::vector<AlgoConfig> out;
  const std::size_t n = std::size_t{1} << subset.size();
  for (std::size_t mask = 0; mask < n; ++mask) {
    AlgoConfig c = base;
    for (std::size_t i = 0; i < subset.size(); ++i) toggle(c.opts, subset[i]) = ((mask >> i) & 1u) != 0;
    out.push_back(std::move(c));
  }
  return out;
}

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  int bins = 20;
  std::vector<int> counts;
  int diverged = 0;

  double edge(int i) const { return lo + (hi - lo) * static_cast<double>(i) / bins; }
  int bin_of(double x) const {
    if (!(hi > lo)) return 0;
    const int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
    return std::clamp(b, 0, bins - 1);
  }
  void add(double x) {
    if (!std::isfinite(x)) {
      ++diverged;
      return;
    }
    ++counts[static_cast<std::size_t>(bin_of(x))];
  }
};

/// Equal-width bins over the finite min/max of `all`.
inline Histogram make_histogram(const std::vector<double>& all, int bins = 20) {
  Histogram h;
  h.bins = bins;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  bool any = false;
  for (double x : all) {
    if (!std::isfinite(x)) continue;
    if (!any) {
      h.lo = h.hi = x;
      any = true;
    }
    h.lo = std::min(h.lo, x);
    h.hi = std::max(h.hi, x);
  }
  return h;
}

}  // namespace polgrad
