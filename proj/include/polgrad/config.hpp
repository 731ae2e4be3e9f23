#pragma once

// Run configuration and its plain-text file format.
//
// A config file is versioned key/value text with one section per algorithm;
// the rows of each section follow the hyperparameter tables the shipped
// defaults were transcribed from:
//
//   version = 1
//   [meta]
//   task = pendulum
//   [ppo]
//   timesteps_per_iteration = 2048
//   reward_clipping = -10, 10      # "--" disables
//   gradient_clipping = 0.5        # -1 disables
//   kl_constraint = N/A            # N/A keeps the built-in default
//   ...
//
// '#' starts a comment. Unknown keys and sections are errors.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "polgrad/csv.hpp"
#include "polgrad/env.hpp"
#include "polgrad/error.hpp"
#include "polgrad/nn.hpp"
#include "polgrad/random.hpp"
#include "polgrad/steppers.hpp"

namespace polgrad {

inline constexpr int kConfigVersion = 1;

/// The nine code-level optimizations plus a few related switches.
struct OptimizationConfig {
  bool value_clip = false;
  bool reward_scaling = false;
  RewardScaling reward_scaling_mode = RewardScaling::returns;
  bool orthogonal_init = false;
  bool lr_anneal = false;
  bool reward_clip = false;
  Range reward_clip_range{-10.0, 10.0};
  bool obs_norm = false;
  bool obs_clip = false;
  Range obs_clip_range{-10.0, 10.0};
  bool tanh_activations = false;
  bool global_grad_clip = false;
  double grad_clip_norm = 0.5;

  // Not among the nine.
  bool kl_decay = false;
  bool adv_norm = false;
  bool reset_return_on_done = true;
  bool per_network_grad_clip = false;
  double hidden_gain = std::numbers::sqrt2;
  double policy_output_gain = 0.01;
  double value_output_gain = 1.0;
};

inline constexpr std::array<std::string_view, 9> kOptimizationNames{
    "value_clip", "reward_scaling", "orthogonal_init", "lr_anneal",       "reward_clip",
    "obs_norm",   "obs_clip",       "tanh_activations", "global_grad_clip"};

/// The four optimizations of the full ablation grid.
inline const std::vector<std::string> kAblationFour{"value_clip", "reward_scaling",
                                                    "orthogonal_init", "lr_anneal"};

inline bool& toggle(OptimizationConfig& o, std::string_view name) {
  if (name == "value_clip") return o.value_clip;
  if (name == "reward_scaling") return o.reward_scaling;
  if (name == "orthogonal_init") return o.orthogonal_init;
  if (name == "lr_anneal") return o.lr_anneal;
  if (name == "reward_clip") return o.reward_clip;
  if (name == "obs_norm") return o.obs_norm;
  if (name == "obs_clip") return o.obs_clip;
  if (name == "tanh_activations") return o.tanh_activations;
  if (name == "global_grad_clip") return o.global_grad_clip;
  if (name == "kl_decay") return o.kl_decay;
  if (name == "adv_norm") return o.adv_norm;
  throw ConfigError("unknown optimization '" + std::string(name) + "'");
}

inline bool toggle(const OptimizationConfig& o, std::string_view name) {
  return toggle(const_cast<OptimizationConfig&>(o), name);
}

inline bool any_code_level_optimization(const OptimizationConfig& o) {
  for (auto n : kOptimizationNames) {
    if (toggle(o, n)) return true;
  }
  return false;
}

struct AlgoConfig {
  Algo algo = Algo::ppo;
  int timesteps = 2048;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double value_lr = 3e-4;
  int value_epochs = 10;
  std::vector<int> policy_hidden{64, 64};
  std::vector<int> value_hidden{64, 64};
  double kl_constraint = 0.01;
  double fisher_fraction = 0.1;
  int cg_steps = 10;
  double cg_damping = 0.1;
  int backtrack_steps = 10;
  double policy_lr = 3e-4;
  int policy_epochs = 10;
  int minibatches = 4;
  double clip_eps = 0.2;
  double entropy_coeff = 0.0;
  double init_log_std = 0.0;
  OptimizationConfig opts;
};

/// Toggle presets: PPO/PPO-NoClip/TRPO+ carry the optimizations,
/// PPO-M and TRPO carry none.
inline AlgoConfig default_algo_config(Algo algo) {
  AlgoConfig c;
  c.algo = algo;
  const bool optimized = algo == Algo::ppo || algo == Algo::ppo_noclip || algo == Algo::trpo_plus;
  if (optimized) {
    for (auto n : kOptimizationNames) toggle(c.opts, n) = true;
  }
  if (algo == Algo::trpo_plus) {
    c.opts.kl_decay = true;
    c.opts.value_clip = false;
  }
  if (algo == Algo::ppo_noclip) c.clip_eps = kNoClipEps;
  return c;
}

inline void validate(const AlgoConfig& c) {
  auto positive = [](double x, const char* what) {
    if (!(x > 0.0)) throw ConfigError(std::string(what) + " must be positive");
  };
  if (c.timesteps < 1) throw ConfigError("timesteps_per_iteration must be >= 1");
  if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw ConfigError("discount must be in (0, 1)");
  if (!(c.gae_lambda >= 0.0 && c.gae_lambda <= 1.0)) throw ConfigError("gae_lambda must be in [0, 1]");
  positive(c.value_lr, "value_lr");
  positive(c.policy_lr, "policy_lr");
  positive(c.clip_eps, "clip_eps");
  positive(c.kl_constraint, "kl_constraint");
  positive(c.cg_damping, "cg_damping");
  if (!(c.fisher_fraction > 0.0 && c.fisher_fraction <= 1.0)) {
    throw ConfigError("fisher_fraction must be in (0, 1]");
  }
  if (c.value_epochs < 0 || c.policy_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.minibatches < 1) throw ConfigError("minibatches must be >= 1");
  if (c.cg_steps < 1 || c.backtrack_steps < 1) throw ConfigError("cg/backtrack steps must be >= 1");
  for (int h : c.policy_hidden) {
    if (h <= 0) throw ConfigError("hidden sizes must be positive");
  }
  for (int h : c.value_hidden) {
    if (h <= 0) throw ConfigError("hidden sizes must be positive");
  }
  if (c.opts.reward_clip && !(c.opts.reward_clip_range.lo < c.opts.reward_clip_range.hi)) {
    throw ConfigError("reward clip range needs lo < hi");
  }
  if (c.opts.obs_clip && !(c.opts.obs_clip_range.lo < c.opts.obs_clip_range.hi)) {
    throw ConfigError("state clip range needs lo < hi");
  }
  if (c.opts.global_grad_clip) positive(c.opts.grad_clip_norm, "gradient_clipping");
  if (c.opts.reward_scaling && c.opts.reward_scaling_mode == RewardScaling::none) {
    throw ConfigError("reward_scaling on with mode none");
  }
  if ((c.algo == Algo::ppo_m || c.algo == Algo::trpo) && any_code_level_optimization(c.opts)) {
    throw ConfigError(to_string(c.algo) +
                      " is defined without code-level optimizations; disable every toggle");
  }
  if (!is_trpo_family(c.algo) && c.opts.kl_decay) {
    throw ConfigError("kl_decay applies only to the TRPO family");
  }
  if (c.algo == Algo::ppo_noclip && c.clip_eps < kNoClipEps) {
    throw ConfigError("ppo-noclip requires clip_eps = 1e32");
  }
}

// --- derived component configs ---------------------------------------------

inline PipelineConfig pipeline_config(const AlgoConfig& c) {
  PipelineConfig p;
  p.reward_scaling_mode = c.opts.reward_scaling ? c.opts.reward_scaling_mode : RewardScaling::none;
  if (c.opts.reward_clip) p.reward_clip = c.opts.reward_clip_range;
  p.obs_normalize = c.opts.obs_norm;
  if (c.opts.obs_clip) p.obs_clip = c.opts.obs_clip_range;
  p.gamma = c.gamma;
  p.reset_return_on_done = c.opts.reset_return_on_done;
  return p;
}

inline StepConfig step_config(const AlgoConfig& c) {
  StepConfig s;
  s.algo = c.algo;
  s.clip_eps = c.clip_eps;
  s.policy_epochs = c.policy_epochs;
  s.minibatches_per_epoch = c.minibatches;
  s.entropy_coeff = c.entropy_coeff;
  s.value_clip = c.opts.value_clip;
  s.value_epochs = c.value_epochs;
  s.trpo = {c.kl_constraint, c.cg_steps, c.cg_damping, c.backtrack_steps, c.fisher_fraction};
  s.grad_clip_norm = c.opts.global_grad_clip ? c.opts.grad_clip_norm : -1.0;
  s.per_network_grad_clip = c.opts.per_network_grad_clip;
  return s;
}

inline Activation activation_of(const AlgoConfig& c) {
  return c.opts.tanh_activations ? Activation::tanh : Activation::relu;
}

inline GaussianPolicy build_policy(const AlgoConfig& c, int obs_dim, int act_dim,
                                   std::uint64_t seed) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), c.policy_hidden.begin(), c.policy_hidden.end());
  sizes.push_back(act_dim);
  const InitScheme scheme =
      c.opts.orthogonal_init ? InitScheme::orthogonal_scaled : InitScheme::default_uniform;
  MLPNet net = build_mlp(sizes, activation_of(c), scheme, seed,
                         {c.opts.hidden_gain, c.opts.policy_output_gain});
  return GaussianPolicy(std::move(net), Vector::Constant(act_dim, c.init_log_std));
}

inline ValueFunction build_value(const AlgoConfig& c, int obs_dim, std::uint64_t seed) {
  std::vector<int> sizes{obs_dim};
  sizes.insert(sizes.end(), c.value_hidden.begin(), c.value_hidden.end());
  sizes.push_back(1);
  const InitScheme scheme =
      c.opts.orthogonal_init ? InitScheme::orthogonal_scaled : InitScheme::default_uniform;
  return ValueFunction(build_mlp(sizes, activation_of(c), scheme, seed,
                                 {c.opts.hidden_gain, c.opts.value_output_gain}));
}

// --- text form ----------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string render_sizes(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::string body = trim(value);
  // Lists may be written bracketed, "[64, 64]", or bare, "64, 64".
  if (body.size() >= 2 && body.front() == '[' && body.back() == ']') {
    body = body.substr(1, body.size() - 2);
  }
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    try {
      out.push_back(csv::parse_double(item));
    } catch (const IoError&) {
      throw ConfigError("bad number '" + item + "' for " + key);
    }
  }
  return out;
}

inline double parse_number(const std::string& key, const std::string& value) {
  auto v = parse_list(key, value);
  if (v.size() != 1) throw ConfigError(key + " expects a single number");
  return v[0];
}

inline int parse_int(const std::string& key, const std::string& value) {
  const double x = parse_number(key, value);
  if (x != static_cast<double>(static_cast<int>(x))) throw ConfigError(key + " expects an integer");
  return static_cast<int>(x);
}

inline bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw ConfigError(key + " expects on/off, got '" + value + "'");
}

inline std::optional<Range> parse_range(const std::string& key, const std::string& value) {
  if (value == "--" || value == "none" || value == "off") return std::nullopt;
  auto v = parse_list(key, value);
  if (v.size() != 2 || !(v[0] < v[1])) throw ConfigError(key + " expects 'lo, hi' with lo < hi");
  return Range{v[0], v[1]};
}

inline const char* flag(bool b) { return b ? "on" : "off"; }

}  // namespace detail

/// Applies one key/value row to `c`.
inline void apply_config_row(AlgoConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (value == "N/A" || value == "n/a") return;
  if (key == "timesteps_per_iteration") c.timesteps = parse_int(key, value);
  else if (key == "discount") c.gamma = parse_number(key, value);
  else if (key == "gae_lambda") c.gae_lambda = parse_number(key, value);
  else if (key == "value_lr") c.value_lr = parse_number(key, value);
  else if (key == "value_epochs") c.value_epochs = parse_int(key, value);
  else if (key == "policy_hidden" || key == "value_hidden") {
    std::vector<int> sizes;
    for (double x : parse_list(key, value)) sizes.push_back(static_cast<int>(x));
    (key == "policy_hidden" ? c.policy_hidden : c.value_hidden) = sizes;
  } else if (key == "kl_constraint") c.kl_constraint = parse_number(key, value);
  else if (key == "fisher_fraction") c.fisher_fraction = parse_number(key, value);
  else if (key == "cg_steps") c.cg_steps = parse_int(key, value);
  else if (key == "cg_damping") c.cg_damping = parse_number(key, value);
  else if (key == "backtrack_steps") c.backtrack_steps = parse_int(key, value);
  else if (key == "policy_lr") c.policy_lr = parse_number(key, value);
  else if (key == "policy_epochs") c.policy_epochs = parse_int(key, value);
  else if (key == "minibatches") c.minibatches = parse_int(key, value);
  else if (key == "clip_eps") c.clip_eps = parse_number(key, value);
  else if (key == "entropy_coeff") c.entropy_coeff = parse_number(key, value);
  else if (key == "init_log_std") c.init_log_std = parse_number(key, value);
  else if (key == "reward_clipping") {
    auto r = parse_range(key, value);
    c.opts.reward_clip = r.has_value();
    if (r) c.opts.reward_clip_range = *r;
  } else if (key == "gradient_clipping") {
    const double x = parse_number(key, value);
    c.opts.global_grad_clip = x > 0.0;
    if (x > 0.0) c.opts.grad_clip_norm = x;
  } else if (key == "reward_normalization") {
    const RewardScaling m = parse_reward_scaling(value);
    c.opts.reward_scaling = m != RewardScaling::none;
    if (c.opts.reward_scaling) c.opts.reward_scaling_mode = m;
  } else if (key == "state_clipping") {
    auto r = parse_range(key, value);
    c.opts.obs_clip = r.has_value();
    if (r) c.opts.obs_clip_range = *r;
  } else if (key == "value_clipping") c.opts.value_clip = parse_flag(key, value);
  else if (key == "orthogonal_init") c.opts.orthogonal_init = parse_flag(key, value);
  else if (key == "lr_annealing") c.opts.lr_anneal = parse_flag(key, value);
  else if (key == "obs_normalization") c.opts.obs_norm = parse_flag(key, value);
  else if (key == "tanh_activations") c.opts.tanh_activations = parse_flag(key, value);
  else if (key == "kl_decay") c.opts.kl_decay = parse_flag(key, value);
  else if (key == "advantage_normalization") c.opts.adv_norm = parse_flag(key, value);
  else if (key == "reset_return_on_done") c.opts.reset_return_on_done = parse_flag(key, value);
  else if (key == "per_network_grad_clip") c.opts.per_network_grad_clip = parse_flag(key, value);
  else if (key == "hidden_gain") c.opts.hidden_gain = parse_number(key, value);
  else if (key == "policy_output_gain") c.opts.policy_output_gain = parse_number(key, value);
  else if (key == "value_output_gain") c.opts.value_output_gain = parse_number(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Every row of `c` in the file's row order. Also the canonical form hashed
/// into run identifiers.
inline std::vector<std::pair<std::string, std::string>> config_rows(const AlgoConfig& c) {
  using csv::format_double;
  using detail::flag;
  auto range = [](bool on, Range r) {
    return on ? format_double(r.lo) + ", " + format_double(r.hi) : std::string("--");
  };
  return {
      {"timesteps_per_iteration", std::to_string(c.timesteps)},
      {"discount", format_double(c.gamma)},
      {"gae_lambda", format_double(c.gae_lambda)},
      {"value_lr", format_double(c.value_lr)},
      {"value_epochs", std::to_string(c.value_epochs)},
      {"policy_hidden", detail::render_sizes(c.policy_hidden)},
      {"value_hidden", detail::render_sizes(c.value_hidden)},
      {"kl_constraint", format_double(c.kl_constraint)},
      {"fisher_fraction", format_double(c.fisher_fraction)},
      {"cg_steps", std::to_string(c.cg_steps)},
      {"cg_damping", format_double(c.cg_damping)},
      {"backtrack_steps", std::to_string(c.backtrack_steps)},
      {"policy_lr", format_double(c.policy_lr)},
      {"policy_epochs", std::to_string(c.policy_epochs)},
      {"clip_eps", format_double(c.clip_eps)},
      {"entropy_coeff", format_double(c.entropy_coeff)},
      {"reward_clipping", range(c.opts.reward_clip, c.opts.reward_clip_range)},
      {"gradient_clipping", c.opts.global_grad_clip ? format_double(c.opts.grad_clip_norm) : "-1"},
      {"reward_normalization",
       c.opts.reward_scaling ? to_string(c.opts.reward_scaling_mode) : std::string("none")},
      {"state_clipping", range(c.opts.obs_clip, c.opts.obs_clip_range)},
      {"value_clipping", flag(c.opts.value_clip)},
      {"orthogonal_init", flag(c.opts.orthogonal_init)},
      {"lr_annealing", flag(c.opts.lr_anneal)},
      {"obs_normalization", flag(c.opts.obs_norm)},
      {"tanh_activations", flag(c.opts.tanh_activations)},
      {"kl_decay", flag(c.opts.kl_decay)},
      {"advantage_normalization", flag(c.opts.adv_norm)},
      {"reset_return_on_done", flag(c.opts.reset_return_on_done)},
      {"per_network_grad_clip", flag(c.opts.per_network_grad_clip)},
      {"minibatches", std::to_string(c.minibatches)},
      {"init_log_std", format_double(c.init_log_std)},
      {"hidden_gain", format_double(c.opts.hidden_gain)},
      {"policy_output_gain", format_double(c.opts.policy_output_gain)},
      {"value_output_gain", format_double(c.opts.value_output_gain)},
  };
}

inline std::string render_section(const AlgoConfig& c) {
  std::string out = "[" + to_string(c.algo) + "]\n";
  for (const auto& [k, v] : config_rows(c)) out += k + " = " + v + "\n";
  return out;
}

inline std::string canonical_string(const AlgoConfig& c) { return render_section(c); }

inline std::uint64_t config_hash(const AlgoConfig& c) { return fnv1a64(canonical_string(c)); }

inline std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

/// Parsed config file: ordered rows per section.
struct ConfigFile {
  int version = kConfigVersion;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;

  bool has(const std::string& section) const { return sections.count(section) != 0; }
};

inline ConfigFile parse_config_text(const std::string& text) {
  ConfigFile f;
  std::stringstream ss(text);
  std::string line;
  std::string section;
  bool saw_version = false;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "meta") parse_algo(section);
      f.sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) {
      if (key != "version") throw ConfigError("line " + std::to_string(lineno) + ": key outside section");
      f.version = detail::parse_int(key, value);
      saw_version = true;
      continue;
    }
    f.sections[section].emplace_back(key, value);
  }
  if (!saw_version) throw ConfigError("config file lacks 'version = 1'");
  if (f.version != kConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(f.version));
  }
  return f;
}

inline ConfigFile load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Built-in preset for `algo`, overridden by the file's matching section.
inline AlgoConfig algo_config_from(const ConfigFile& f, Algo algo) {
  AlgoConfig c = default_algo_config(algo);
  const std::string name = to_string(algo);
  if (f.has(name)) {
    for (const auto& [k, v] : f.sections.at(name)) apply_config_row(c, k, v);
  }
  return c;
}

}  // namespace polgrad
