#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "polgrad/config.hpp"
#include "polgrad/csv.hpp"
#include "polgrad/stats.hpp"
#include "polgrad/train.hpp"

namespace polgrad {

namespace fs = std::filesystem;

struct ExperimentManifest {
  EnvId env = EnvId::pendulum;
  /// One base config per algorithm, in report order.
  std::vector<AlgoConfig> configs;
  /// Optimizations to ablate; empty runs each base config as-is.
  std::vector<std::string> ablate;
  /// Step-size grids: learning rates for the PPO family, KL bounds for the
  /// TRPO family. Empty means the config's own value.
  std::vector<double> lrs;
  std::vector<double> deltas;
  std::vector<std::uint64_t> seeds;
  int iterations = 100;
  int heldout_trajectories = 5;
  int diag_cadence = 1;
  std::string out_dir = "results";
  /// Scheduling only; excluded from the hash.
  int workers = 1;

  nlohmann::json to_json() const {
    nlohmann::json cfgs = nlohmann::json::array();
    for (const auto& c : configs) cfgs.push_back(config_json(c));
    return {{"version", 1},
            {"env", to_string(env)},
            {"configs", cfgs},
            {"ablate", ablate},
            {"lrs", lrs},
            {"deltas", deltas},
            {"seeds", seeds},
            {"iterations", iterations},
            {"heldout_trajectories", heldout_trajectories},
            {"diag_cadence", diag_cadence}};
  }

  static ExperimentManifest from_json(const nlohmann::json& j) {
    ExperimentManifest m;
    m.env = parse_env_id(j.at("env").get<std::string>());
    for (const auto& c : j.at("configs")) m.configs.push_back(config_from_json(c));
    m.ablate = j.at("ablate").get<std::vector<std::string>>();
    m.lrs = j.at("lrs").get<std::vector<double>>();
    m.deltas = j.at("deltas").get<std::vector<double>>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.iterations = j.at("iterations").get<int>();
    m.heldout_trajectories = j.at("heldout_trajectories").get<int>();
    m.diag_cadence = j.at("diag_cadence").get<int>();
    return m;
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

/// "A..B" (inclusive) or a comma list.
inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  const auto dots = s.find("..");
  try {
    if (dots != std::string::npos) {
      const std::uint64_t a = std::stoull(s.substr(0, dots));
      const std::uint64_t b = std::stoull(s.substr(dots + 2));
      if (b < a) throw ConfigError("seed range '" + s + "' is empty");
      for (std::uint64_t x = a; x <= b; ++x) out.push_back(x);
    } else {
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) out.push_back(std::stoull(item));
      }
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad seed list '" + s + "'");
  }
  return out;
}

/// Applies the [meta] section of a config file: experiment-level settings
/// that are not part of any algorithm's config.
inline void apply_meta(ExperimentManifest& m, const ConfigFile& f) {
  if (!f.has("meta")) return;
  for (const auto& [k, v] : f.sections.at("meta")) {
    if (k == "env") m.env = parse_env_id(v);
    else if (k == "iterations") m.iterations = detail::parse_int(k, v);
    else if (k == "seeds") m.seeds = parse_seeds(v);
    else if (k == "lr_grid") m.lrs = detail::parse_list(k, v);
    else if (k == "delta_grid") m.deltas = detail::parse_list(k, v);
    else if (k == "workers") m.workers = detail::parse_int(k, v);
    else if (k == "heldout_trajectories") m.heldout_trajectories = detail::parse_int(k, v);
    else if (k == "diag_cadence") m.diag_cadence = detail::parse_int(k, v);
    else throw ConfigError("unknown [meta] key '" + k + "'");
  }
}

/// One grid cell: a fully specified config whose step size is searched.
struct Cell {
  std::string label;
  AlgoConfig config;
  std::vector<double> steps;
  bool trpo = false;
};

inline AlgoConfig with_step(AlgoConfig c, double step) {
  if (is_trpo_family(c.algo)) c.kl_constraint = step;
  else c.policy_lr = step;
  return c;
}

inline std::string cell_label(const AlgoConfig& c, const std::vector<std::string>& ablate) {
  std::string s = to_string(c.algo);
  for (const auto& name : ablate) s += "|" + name + "=" + (toggle(c.opts, name) ? "on" : "off");
  return s;
}

inline std::vector<Cell> enumerate_cells(const ExperimentManifest& m) {
  std::vector<Cell> out;
  for (const auto& base : m.configs) {
    std::vector<AlgoConfig> variants =
        m.ablate.empty() ? std::vector<AlgoConfig>{base} : enumerate_ablation_configs(base, m.ablate);
    for (auto& c : variants) {
      Cell cell;
      cell.trpo = is_trpo_family(c.algo);
      const auto& grid = cell.trpo ? m.deltas : m.lrs;
      cell.steps = grid.empty() ? std::vector<double>{cell.trpo ? c.kl_constraint : c.policy_lr} : grid;
      std::sort(cell.steps.begin(), cell.steps.end());
      cell.steps.erase(std::unique(cell.steps.begin(), cell.steps.end()), cell.steps.end());
      cell.label = cell_label(c, m.ablate);
      cell.config = std::move(c);
      out.push_back(std::move(cell));
    }
  }
  return out;
}

inline void validate(const ExperimentManifest& m) {
  if (m.configs.empty()) throw ConfigError("manifest lists no algorithm");
  if (m.seeds.empty()) throw ConfigError("manifest seed list is empty");
  if (m.iterations < 1) throw ConfigError("iterations must be >= 1");
  if (m.workers < 1) throw ConfigError("workers must be >= 1");
  for (double x : m.lrs) {
    if (!(x > 0.0)) throw ConfigError("learning rates must be positive");
  }
  for (double x : m.deltas) {
    if (!(x > 0.0)) throw ConfigError("KL bounds must be positive");
  }
  for (std::size_t i = 0; i < m.seeds.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (m.seeds[i] == m.seeds[j]) throw ConfigError("duplicate seed " + std::to_string(m.seeds[i]));
    }
  }
  for (const auto& cell : enumerate_cells(m)) {
    for (double s : cell.steps) validate(with_step(cell.config, s));
  }
}

/// Run identity: everything that determines the run's outputs.
inline std::string run_key(EnvId env, const AlgoConfig& c, std::uint64_t seed, int iterations,
                           int heldout, int cadence) {
  std::ostringstream s;
  s << "env=" << to_string(env) << "\nseed=" << seed << "\niterations=" << iterations
    << "\nheldout=" << heldout << "\ncadence=" << cadence << "\n"
    << canonical_string(c);
  return hex64(fnv1a64(s.str()));
}

struct Job {
  std::size_t cell = 0;
  double step = 0.0;
  std::uint64_t seed = 0;
  std::string key;
};

inline std::vector<Job> enumerate_jobs(const ExperimentManifest& m, const std::vector<Cell>& cells) {
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (double step : cells[i].steps) {
      for (std::uint64_t seed : m.seeds) {
        jobs.push_back({i, step, seed,
                        run_key(m.env, with_step(cells[i].config, step), seed, m.iterations,
                                m.heldout_trajectories, m.diag_cadence)});
      }
    }
  }
  return jobs;
}

inline std::string run_dir(const std::string& out, const std::string& key) {
  return out + "/runs/" + key;
}

inline bool run_complete(const std::string& dir) {
  const fs::path p = fs::path(dir) / "run.json";
  if (!fs::exists(p)) return false;
  try {
    std::ifstream f(p);
    return nlohmann::json::parse(f).value("complete", false);
  } catch (const std::exception&) {
    return false;
  }
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in '" + path + "': " + e.what());
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
}

/// Score used for selection: the recorded final reward, or -inf for a
/// diverged run or a run without any completed episode.
inline double run_score(const nlohmann::json& run) {
  const auto& r = run.at("final_reward");
  if (r.is_null()) return -std::numeric_limits<double>::infinity();
  return r.get<double>();
}

inline std::uint64_t bootstrap_seed(const std::string& label) { return fnv1a64("bootstrap:" + label); }

/// Histogram rows for the selected agents. Each ablated optimization
/// partitions the agents into off/on; without an ablation the partition is
/// by algorithm. Diverged agents go to bin -1.
inline std::string histogram_csv(const nlohmann::json& summary) {
  std::vector<double> all;
  for (const auto& cell : summary.at("cells")) {
    for (const auto& a : cell.at("selected")) all.push_back(run_score(a));
  }
  const Histogram proto = make_histogram(all);
  const auto ablate = summary.at("ablate").get<std::vector<std::string>>();

  std::vector<std::pair<std::string, std::vector<std::string>>> partitions;
  if (ablate.empty()) {
    std::vector<std::string> algos;
    for (const auto& cell : summary.at("cells")) {
      const auto a = cell.at("algo").get<std::string>();
      if (std::find(algos.begin(), algos.end(), a) == algos.end()) algos.push_back(a);
    }
    partitions.emplace_back("algo", algos);
  } else {
    for (const auto& name : ablate) partitions.emplace_back(name, std::vector<std::string>{"off", "on"});
  }

  std::ostringstream out;
  out << "partition,group,bin,bin_lo,bin_hi,count\n";
  for (const auto& [part, groups] : partitions) {
    for (const auto& group : groups) {
      Histogram h = proto;
      for (const auto& cell : summary.at("cells")) {
        const std::string g = part == "algo" ? cell.at("algo").get<std::string>()
                                             : cell.at("toggles").at(part).get<std::string>();
        if (g != group) continue;
        for (const auto& a : cell.at("selected")) h.add(run_score(a));
      }
      for (int b = 0; b < h.bins; ++b) {
        out << csv::join({part, group, std::to_string(b), csv::format_double(h.edge(b)),
                          csv::format_double(h.edge(b + 1)),
                          std::to_string(h.counts[static_cast<std::size_t>(b)])})
            << '\n';
      }
      out << csv::join({part, group, "-1", "", "", std::to_string(h.diverged)}) << '\n';
    }
  }
  return out.str();
}

struct ExperimentResult {
  nlohmann::json summary;
  int trained = 0;
  int skipped = 0;
  int failed = 0;
};

/// Trains every (cell, step, seed) not already on disk, then aggregates.
inline ExperimentResult run_experiment(const ExperimentManifest& m) {
  validate(m);
  const std::string mhash = m.hash();
  fs::create_directories(m.out_dir + "/runs");
  nlohmann::json mj = m.to_json();
  mj["hash"] = mhash;
  write_text(m.out_dir + "/manifest.json", mj.dump(2) + "\n");

  const std::vector<Cell> cells = enumerate_cells(m);
  const std::vector<Job> jobs = enumerate_jobs(m, cells);
  ExperimentResult res;
  std::vector<const Job*> pending;
  for (const auto& j : jobs) {
    if (run_complete(run_dir(m.out_dir, j.key))) ++res.skipped;
    else pending.push_back(&j);
  }

  std::atomic<std::size_t> next{0};
  std::atomic<int> failed{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      const Job& job = *pending[i];
      const std::string dir = run_dir(m.out_dir, job.key);
      RunSpec spec;
      spec.env = m.env;
      spec.config = with_step(cells[job.cell].config, job.step);
      spec.seed = job.seed;
      spec.iterations = m.iterations;
      spec.heldout_trajectories = m.heldout_trajectories;
      spec.diag_cadence = m.diag_cadence;
      spec.manifest_hash = mhash;
      try {
        const RunResult r = train_run(spec);
        write_run_dir(dir, spec, r, {{"cell", cells[job.cell].label}, {"step", job.step}});
      } catch (const std::exception& e) {
        failed.fetch_add(1);
        try {
          fs::create_directories(dir);
          write_text(dir + "/failure.json", nlohmann::json{{"error", e.what()}}.dump(2) + "\n");
        } catch (const std::exception&) {
        }
      }
    }
  };
  const int nthreads = std::max(1, std::min<int>(m.workers, static_cast<int>(pending.size())));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  res.failed = failed.load();
  res.trained = static_cast<int>(pending.size()) - res.failed;

  // Aggregation, after every run has finished.
  nlohmann::json summary = {{"manifest_hash", mhash},
                            {"env", to_string(m.env)},
                            {"ablate", m.ablate},
                            {"seeds", m.seeds},
                            {"iterations", m.iterations}};
  nlohmann::json jcells = nlohmann::json::array();
  std::size_t selected_agents = 0;
  std::map<std::string, double> base_means;
  bool all_complete = true;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const Cell& cell = cells[ci];
    std::map<double, std::vector<double>> scores;
    std::map<double, std::vector<nlohmann::json>> runs;
    bool complete = true;
    for (const auto& job : jobs) {
      if (job.cell != ci) continue;
      const std::string dir = run_dir(m.out_dir, job.key);
      if (!run_complete(dir)) {
        complete = false;
        scores[job.step].push_back(-std::numeric_limits<double>::infinity());
        runs[job.step].push_back({{"seed", job.seed}, {"run", job.key}, {"final_reward", nullptr},
                                  {"diverged", false}, {"failed", true}});
        continue;
      }
      const nlohmann::json rj = read_json(dir + "/run.json");
      scores[job.step].push_back(run_score(rj));
      runs[job.step].push_back({{"seed", job.seed},
                                {"run", job.key},
                                {"final_reward", rj.at("final_reward")},
                                {"diverged", rj.at("diverged")},
                                {"failed", false}});
    }
    all_complete = all_complete && complete;
    const double best = select_best_step(scores);
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& [step, sc] : scores) {
      nlohmann::json jsc = nlohmann::json::array();
      for (double x : sc) jsc.push_back(json_number(x));
      grid.push_back({{"step", step}, {"mean", json_number(seed_mean_score(sc))}, {"scores", jsc}});
    }
    const std::vector<double>& chosen = scores.at(best);
    selected_agents += chosen.size();
    const double mean = seed_mean_score(chosen);
    nlohmann::json toggles = nlohmann::json::object();
    for (auto n : kOptimizationNames) toggles[std::string(n)] = toggle(cell.config.opts, n) ? "on" : "off";
    nlohmann::json jc = {{"label", cell.label},
                         {"algo", to_string(cell.config.algo)},
                         {"toggles", toggles},
                         {"config_hash", hex64(config_hash(with_step(cell.config, best)))},
                         {"step_kind", cell.trpo ? "kl_constraint" : "policy_lr"},
                         {"best_step", best},
                         {"grid", grid},
                         {"selected", runs.at(best)},
                         {"mean", json_number(mean)},
                         {"complete", complete}};
    if (std::isfinite(mean)) {
      const Interval ci_ = bootstrap_ci(chosen, 1000, 0.95, bootstrap_seed(cell.label));
      jc["ci_lo"] = ci_.lo;
      jc["ci_hi"] = ci_.hi;
      jc["median"] = median_of(chosen);
      if (m.ablate.empty()) base_means[to_string(cell.config.algo)] = mean;
    } else {
      jc["ci_lo"] = nullptr;
      jc["ci_hi"] = nullptr;
      jc["median"] = nullptr;
    }
    jcells.push_back(std::move(jc));
  }
  summary["cells"] = jcells;
  summary["configs"] = cells.size();
  summary["selected_agents"] = selected_agents;
  summary["complete"] = all_complete;
  const char* four[] = {"ppo", "ppo-m", "trpo", "trpo-plus"};
  if (std::all_of(std::begin(four), std::end(four), [&](const char* a) { return base_means.count(a); })) {
    const AaiAcli r = compute_aai_acli(base_means["ppo"], base_means["ppo-m"], base_means["trpo"],
                                       base_means["trpo-plus"]);
    summary["aai"] = r.aai;
    summary["acli"] = r.acli;
  } else {
    summary["aai"] = nullptr;
    summary["acli"] = nullptr;
  }
  write_text(m.out_dir + "/summary.json", summary.dump(2) + "\n");
  write_text(m.out_dir + "/histogram.csv", histogram_csv(summary));
  res.summary = std::move(summary);
  return res;
}

namespace detail {
inline std::string fmt_opt(const nlohmann::json& j) {
  return j.is_null() ? std::string() : csv::format_double(j.get<double>());
}

inline std::string fmt_md(const nlohmann::json& j) {
  if (j.is_null()) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", j.get<double>());
  return buf;
}
}  // namespace detail

/// Writes report/table.md, table.csv, histogram.csv and diagnostics.csv from
/// a finished experiment directory. Output depends only on files on disk.
inline void emit_report(const std::string& results_dir) {
  const nlohmann::json summary = read_json(results_dir + "/summary.json");
  const std::string out = results_dir + "/report";
  fs::create_directories(out);

  std::ostringstream md, tcsv;
  md << "# Results: " << summary.at("env").get<std::string>() << "\n\n"
     << "Final reward is the mean raw episode reward over the last " << kFinalRewardWindow
     << " iterations, averaged over seeds at the selected step size. Brackets give a "
        "1000-resample percentile bootstrap 95% interval.\n\n"
     << "| config | step | seeds | mean [95% CI] | median |\n|---|---|---|---|---|\n";
  tcsv << "label,algo,step_kind,best_step,seeds,mean,ci_lo,ci_hi,median,complete\n";
  for (const auto& c : summary.at("cells")) {
    const std::string label = c.at("label").get<std::string>();
    const std::size_t n = c.at("selected").size();
    md << "| " << label << " | " << csv::format_double(c.at("best_step").get<double>()) << " | " << n
       << " | " << detail::fmt_md(c.at("mean")) << " [" << detail::fmt_md(c.at("ci_lo")) << ", "
       << detail::fmt_md(c.at("ci_hi")) << "] | " << detail::fmt_md(c.at("median")) << " |\n";
    tcsv << csv::join({label, c.at("algo").get<std::string>(), c.at("step_kind").get<std::string>(),
                       csv::format_double(c.at("best_step").get<double>()), std::to_string(n),
                       detail::fmt_opt(c.at("mean")), detail::fmt_opt(c.at("ci_lo")),
                       detail::fmt_opt(c.at("ci_hi")), detail::fmt_opt(c.at("median")),
                       c.at("complete").get<bool>() ? "1" : "0"})
         << '\n';
  }
  for (const char* row : {"aai", "acli"}) {
    if (summary.at(row).is_null()) continue;
    std::string name = row;
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::toupper(ch); });
    md << "| " << name << " | | | " << detail::fmt_md(summary.at(row)) << " | |\n";
    tcsv << csv::join({name, "", "", "", "", detail::fmt_opt(summary.at(row)), "", "", "", "1"}) << '\n';
  }
  write_text(out + "/table.md", md.str());
  write_text(out + "/table.csv", tcsv.str());
  write_text(out + "/histogram.csv", histogram_csv(summary));

  // Per-iteration diagnostics of every selected agent, keyed by cell label.
  std::ostringstream diag;
  diag << "cell,step," << metrics_csv_header() << '\n';
  for (const auto& c : summary.at("cells")) {
    const std::string label = c.at("label").get<std::string>();
    const std::string step = csv::format_double(c.at("best_step").get<double>());
    for (const auto& a : c.at("selected")) {
      const std::string path = results_dir + "/runs/" + a.at("run").get<std::string>() + "/metrics.csv";
      if (!fs::exists(path)) continue;
      for (const auto& r : read_metrics_csv(path)) {
        diag << csv::join({label, step}) << ',' << metrics_csv_row(r) << '\n';
      }
    }
  }
  write_text(out + "/diagnostics.csv", diag.str());
}

}  // namespace polgrad
