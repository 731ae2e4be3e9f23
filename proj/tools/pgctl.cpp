// Command-line front end: train, ablate, grid, diagnose, report.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "polgrad/polgrad.hpp"

namespace fs = std::filesystem;
using namespace polgrad;

namespace {

struct Options {
  std::string config_path;
  std::string env;
  std::string algo;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::optional<int> iters;
  std::optional<int> timesteps;
  std::string out;
  std::optional<int> workers;
  std::string lrs;
  std::string deltas;
  std::string ablate;
  std::optional<int> heldout;
  std::optional<int> cadence;
  std::string dump;
  std::map<std::string, std::string> opt_flags;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Config-file settings overridden by flags. `out_dir` stays empty unless
/// given, so each subcommand can pick its own default.
ExperimentManifest resolve(const Options& o, const std::string& default_algo) {
  ExperimentManifest m;
  m.seeds = {0};
  m.out_dir.clear();
  ConfigFile file;
  if (!o.config_path.empty()) file = load_config_file(o.config_path);
  apply_meta(m, file);
  if (!o.env.empty()) m.env = parse_env_id(o.env);
  if (o.iters) m.iterations = *o.iters;
  if (o.seed) m.seeds = {*o.seed};
  if (!o.seeds.empty()) m.seeds = parse_seeds(o.seeds);
  if (o.workers) m.workers = *o.workers;
  if (o.heldout) m.heldout_trajectories = *o.heldout;
  if (o.cadence) m.diag_cadence = *o.cadence;
  if (!o.lrs.empty()) m.lrs = detail::parse_list("--lrs", o.lrs);
  if (!o.deltas.empty()) m.deltas = detail::parse_list("--deltas", o.deltas);
  if (!o.out.empty()) m.out_dir = o.out;

  for (const auto& name : split(o.algo.empty() ? default_algo : o.algo, ',')) {
    AlgoConfig c = algo_config_from(file, parse_algo(name));
    if (o.timesteps) c.timesteps = *o.timesteps;
    for (const auto& [opt, value] : o.opt_flags) {
      toggle(c.opts, opt) = detail::parse_flag("--opt-" + opt, value);
    }
    m.configs.push_back(std::move(c));
  }
  return m;
}

int cmd_train(const Options& o) {
  ExperimentManifest m = resolve(o, "ppo");
  if (m.out_dir.empty()) m.out_dir = "run";
  if (m.configs.size() != 1) throw ConfigError("train takes exactly one --algo");
  if (m.seeds.size() != 1) throw ConfigError("train takes exactly one seed");
  validate(m.configs.front());
  RunSpec spec;
  spec.env = m.env;
  spec.config = m.configs.front();
  spec.seed = m.seeds.front();
  spec.iterations = m.iterations;
  spec.heldout_trajectories = m.heldout_trajectories;
  spec.diag_cadence = m.diag_cadence;
  spec.dump_dir = o.dump;
  const RunResult res = train_run(spec);
  write_run_dir(m.out_dir, spec, res);
  std::cout << nlohmann::json{{"out", m.out_dir},
                              {"iterations", res.metrics.size()},
                              {"final_reward", json_number(res.final_reward)},
                              {"diverged", res.diverged},
                              {"error", res.error}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_experiment(const Options& o, bool ablate) {
  ExperimentManifest m = resolve(o, "ppo");
  if (m.out_dir.empty()) m.out_dir = "results";
  if (ablate) {
    m.ablate = o.ablate.empty() ? kAblationFour : split(o.ablate, ',');
  } else if (!o.ablate.empty()) {
    throw ConfigError("--ablate is only valid with the ablate subcommand");
  }
  const ExperimentResult res = run_experiment(m);
  std::cout << nlohmann::json{{"out", m.out_dir},
                              {"configs", res.summary.at("configs")},
                              {"selected_agents", res.summary.at("selected_agents")},
                              {"trained", res.trained},
                              {"skipped", res.skipped},
                              {"failed", res.failed},
                              {"aai", res.summary.at("aai")},
                              {"acli", res.summary.at("acli")}}
                   .dump()
            << '\n';
  return res.failed == 0 ? 0 : 3;
}

/// Recomputes training-batch ratio/KL metrics from `train --dump` output.
int cmd_diagnose(const Options& o) {
  if (o.dump.empty()) throw ConfigError("diagnose needs --dump DIR");
  if (!fs::is_directory(o.dump)) throw IoError("dump directory '" + o.dump + "' does not exist");
  std::vector<std::string> tags;
  for (const auto& e : fs::directory_iterator(o.dump)) {
    const std::string f = e.path().filename().string();
    const std::string suffix = "_batch.csv";
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0) {
      tags.push_back(f.substr(0, f.size() - suffix.size()));
    }
  }
  if (tags.empty()) throw IoError("no batch dumps in '" + o.dump + "'");
  std::sort(tags.begin(), tags.end());
  std::ostringstream out;
  out << "iteration,max_ratio,mean_kl,max_kl,ratio_overflow\n";
  for (const auto& tag : tags) {
    const std::string stem = o.dump + "/" + tag;
    const RolloutBatch batch = read_batch_csv(stem + "_batch.csv");
    const GaussianPolicy old_p = load_policy(stem + "_policy_old.bin");
    const GaussianPolicy new_p = load_policy(stem + "_policy_new.bin");
    const TrainMetrics m = train_metrics(batch, new_p, old_p);
    out << csv::join({std::to_string(std::stoi(tag)), csv::format_double(m.max_ratio),
                      csv::format_double(m.mean_kl), csv::format_double(m.max_kl),
                      m.ratio_overflow ? "1" : "0"})
        << '\n';
  }
  if (o.out.empty()) {
    std::cout << out.str();
  } else {
    write_text(o.out, out.str());
  }
  return 0;
}

int cmd_report(const Options& o) {
  if (o.out.empty()) throw ConfigError("report needs --out RESULTS_DIR");
  emit_report(o.out);
  std::cout << nlohmann::json{{"report", o.out + "/report"}}.dump() << '\n';
  return 0;
}

void error_json(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_path, "Config file");
  app->add_option("--env", o.env, "pendulum | pointgoal");
  app->add_option("--algo", o.algo, "ppo | ppo-m | ppo-noclip | trpo | trpo-plus (comma list for grids)");
  app->add_option("--seed", o.seed, "Single seed");
  app->add_option("--seeds", o.seeds, "Seed range A..B or comma list");
  app->add_option("--iters", o.iters, "Training iterations");
  app->add_option("--timesteps", o.timesteps, "Timesteps per iteration");
  app->add_option("--workers", o.workers, "Concurrent runs");
  app->add_option("--heldout", o.heldout, "Heldout trajectories per measurement (0 disables)");
  app->add_option("--cadence", o.cadence, "Heldout measurement cadence in iterations");
  for (auto name : kOptimizationNames) {
    const std::string n(name);
    std::string dashed = n;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--opt-" + n;
    if (dashed != n) names += ",--opt-" + dashed;
    app->add_option_function<std::string>(
           names, [&o, n](const std::string& v) { o.opt_flags[n] = v; }, "on | off")
        ->check(CLI::IsMember({"on", "off"}));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Policy-gradient training and ablation harness"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "Train one agent");
  add_common(train, o);
  train->add_option("--out", o.out, "Run directory (default: run)");
  train->add_option("--dump", o.dump, "Dump per-iteration batches and policies here");

  auto* ablate = app.add_subcommand("ablate", "Enumerate on/off optimization configs and run the grid");
  add_common(ablate, o);
  ablate->add_option("--out", o.out, "Results directory");
  ablate->add_option("--ablate", o.ablate, "Comma list of optimizations (default: the four)");
  ablate->add_option("--lrs", o.lrs, "Learning-rate grid");
  ablate->add_option("--deltas", o.deltas, "KL-bound grid");

  auto* grid = app.add_subcommand("grid", "Step-size grid search over seeds");
  add_common(grid, o);
  grid->add_option("--out", o.out, "Results directory");
  grid->add_option("--lrs", o.lrs, "Learning-rate grid");
  grid->add_option("--deltas", o.deltas, "KL-bound grid");

  auto* diagnose = app.add_subcommand("diagnose", "Recompute ratio/KL metrics from dumps");
  diagnose->add_option("--dump", o.dump, "Dump directory written by train --dump")->required();
  diagnose->add_option("--out", o.out, "Output CSV (default stdout)");

  auto* report = app.add_subcommand("report", "Emit tables and histograms for a results directory");
  report->add_option("--out", o.out, "Results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_json("usage", e.what());
    return 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*ablate) return cmd_experiment(o, true);
    if (*grid) return cmd_experiment(o, false);
    if (*diagnose) return cmd_diagnose(o);
    if (*report) return cmd_report(o);
  } catch (const Error& e) {
    error_json(e.kind(), e.what());
    return e.kind() == "config" ? 2 : 1;
  } catch (const std::exception& e) {
    error_json("internal", e.what());
    return 1;
  }
  return 0;
}
