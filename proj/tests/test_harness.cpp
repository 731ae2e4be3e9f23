#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "polgrad/experiment.hpp"
#include "polgrad/stats.hpp"

using namespace polgrad;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

AlgoConfig tiny(Algo algo) {
  AlgoConfig c = default_algo_config(algo);
  c.timesteps = 200;
  c.policy_hidden = {8};
  c.value_hidden = {8};
  c.policy_epochs = 1;
  c.value_epochs = 1;
  return c;
}

ExperimentManifest tiny_manifest(const std::string& name, std::vector<Algo> algos) {
  ExperimentManifest m;
  m.env = EnvId::pendulum;
  for (Algo a : algos) m.configs.push_back(tiny(a));
  m.seeds = {1, 2};
  m.iterations = 3;
  m.heldout_trajectories = 1;
  m.out_dir = (fs::temp_directory_path() / ("polgrad_harness_" + name)).string();
  fs::remove_all(m.out_dir);
  return m;
}

// All regular files under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(Ablation, FourOptimizationsGiveSixteenConfigs) {
  const AlgoConfig base = default_algo_config(Algo::ppo);
  const auto cfgs = enumerate_ablation_configs(base, kAblationFour);
  ASSERT_EQ(cfgs.size(), 16u);
  std::set<std::uint64_t> hashes;
  for (const auto& c : cfgs) hashes.insert(config_hash(c));
  EXPECT_EQ(hashes.size(), 16u);
  // Binary counting, first-listed toggle is the least significant bit.
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    for (std::size_t b = 0; b < kAblationFour.size(); ++b) {
      EXPECT_EQ(toggle(cfgs[i].opts, kAblationFour[b]), ((i >> b) & 1u) != 0);
    }
    EXPECT_EQ(cfgs[i].opts.obs_norm, base.opts.obs_norm);
  }
}

TEST(Ablation, SingleToggleAndErrors) {
  const AlgoConfig base = default_algo_config(Algo::ppo);
  const auto cfgs = enumerate_ablation_configs(base, {"obs_clip"});
  ASSERT_EQ(cfgs.size(), 2u);
  EXPECT_FALSE(cfgs[0].opts.obs_clip);
  EXPECT_TRUE(cfgs[1].opts.obs_clip);
  EXPECT_THROW(enumerate_ablation_configs(base, {}), ConfigError);
  EXPECT_THROW(enumerate_ablation_configs(base, {"warp_drive"}), ConfigError);
  EXPECT_THROW(enumerate_ablation_configs(base, {"obs_clip", "obs_clip"}), ConfigError);
}

TEST(GridSearch, TieGoesToSmallerStep) {
  EXPECT_EQ(select_best_step({{1e-4, {3.0, 3.0}}, {3e-4, {5.0, 1.0}}}), 1e-4);
  EXPECT_EQ(select_best_step({{1e-4, {3.0, 3.0}}, {3e-4, {5.0, 1.5}}}), 3e-4);
  EXPECT_EQ(select_best_step({{7e-4, {-2.0}}}), 7e-4);
}

TEST(GridSearch, DivergedSeedScoresMinusInfinity) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(seed_mean_score({1.0, -inf}), -inf);
  EXPECT_EQ(seed_mean_score({1.0, std::nan("")}), -inf);
  EXPECT_EQ(select_best_step({{1e-4, {100.0, -inf}}, {3e-4, {-5.0, -5.0}}}), 3e-4);
}

TEST(Bootstrap, ConstantDataIsDegenerate) {
  const Interval ci = bootstrap_ci({2.5, 2.5, 2.5, 2.5}, 1000, 0.95, 1);
  EXPECT_EQ(ci.lo, 2.5);
  EXPECT_EQ(ci.hi, 2.5);
  const Interval one = bootstrap_ci({-7.0}, 1000, 0.95, 1);
  EXPECT_EQ(one.lo, -7.0);
  EXPECT_EQ(one.hi, -7.0);
  EXPECT_THROW(bootstrap_ci({}, 1000, 0.95, 1), ContractError);
}

TEST(Bootstrap, DeterministicPerSeed) {
  const Interval a = bootstrap_ci({1, 2, 3, 4, 5}, 1000, 0.95, 17);
  const Interval b = bootstrap_ci({1, 2, 3, 4, 5}, 1000, 0.95, 17);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_LE(a.lo, 3.0);
  EXPECT_GE(a.hi, 3.0);
}

TEST(Bootstrap, NormalWidthMatchesStandardError) {
  Rng rng(99);
  std::vector<double> x(10000);
  for (double& v : x) v = rng.normal();
  const Interval ci = bootstrap_ci(x, 1000, 0.95, 5);
  EXPECT_LT(ci.lo, 0.0);
  EXPECT_GT(ci.hi, 0.0);
  const double analytic = 2.0 * 1.96 / 100.0;
  EXPECT_NEAR(ci.hi - ci.lo, analytic, 0.2 * analytic);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_EQ(percentile({4, 1, 3, 2}, 0.0), 1.0);
  EXPECT_EQ(percentile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_NEAR(percentile({0, 10}, 0.025), 0.25, 1e-15);
}

TEST(AaiAcli, ReferenceRows) {
  const AaiAcli walker = compute_aai_acli(3292, 2735, 2791, 3050);
  EXPECT_EQ(walker.aai, 242.0);
  EXPECT_EQ(walker.acli, 557.0);
  const AaiAcli humanoid = compute_aai_acli(806, 674, 586, 1030);
  EXPECT_EQ(humanoid.aai, 224.0);
  EXPECT_EQ(humanoid.acli, 444.0);
  const AaiAcli flat = compute_aai_acli(5, 5, 5, 5);
  EXPECT_EQ(flat.aai, 0.0);
  EXPECT_EQ(flat.acli, 0.0);
  EXPECT_THROW(compute_aai_acli(1, std::nan(""), 1, 1), ContractError);
}

TEST(Histogram, PartitionAndDiverged) {
  const double inf = std::numeric_limits<double>::infinity();
  Histogram h = make_histogram({0.0, 1.0, 2.0, -inf}, 4);
  EXPECT_EQ(h.lo, 0.0);
  EXPECT_EQ(h.hi, 2.0);
  for (double x : {0.0, 1.0, 2.0, -inf}) h.add(x);
  int total = h.diverged;
  for (int c : h.counts) total += c;
  EXPECT_EQ(total, 4);
  EXPECT_EQ(h.diverged, 1);
  EXPECT_EQ(h.counts.back(), 1);
}

TEST(ConfigFile, ParseAndValidate) {
  const ConfigFile f = parse_config_text(
      "version = 1\n[ppo]\npolicy_lr = 1e-4  # comment\nvalue_clipping = off\n[ppo-m]\n");
  const AlgoConfig ppo = algo_config_from(f, Algo::ppo);
  EXPECT_EQ(ppo.policy_lr, 1e-4);
  EXPECT_FALSE(ppo.opts.value_clip);
  EXPECT_NO_THROW(validate(ppo));
  EXPECT_NO_THROW(validate(algo_config_from(f, Algo::ppo_m)));
  EXPECT_THROW(parse_config_text("[ppo]\n"), ConfigError);
  EXPECT_THROW(parse_config_text("version = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("version = 1\n[sac]\n"), ConfigError);
  EXPECT_THROW(algo_config_from(parse_config_text("version = 1\n[ppo]\nwarp = 1\n"), Algo::ppo),
               ConfigError);
}

TEST(ConfigFile, PpoMRejectsAnyOptimization) {
  for (auto name : kOptimizationNames) {
    AlgoConfig c = default_algo_config(Algo::ppo_m);
    EXPECT_NO_THROW(validate(c));
    toggle(c.opts, name) = true;
    EXPECT_THROW(validate(c), ConfigError) << name;
  }
  AlgoConfig k = default_algo_config(Algo::ppo);
  k.opts.kl_decay = true;
  EXPECT_THROW(validate(k), ConfigError);
}

TEST(ConfigFile, CanonicalRoundTrip) {
  for (Algo a : {Algo::ppo, Algo::ppo_m, Algo::ppo_noclip, Algo::trpo, Algo::trpo_plus}) {
    const AlgoConfig c = default_algo_config(a);
    const ConfigFile f = parse_config_text("version = 1\n" + render_section(c));
    EXPECT_EQ(canonical_string(algo_config_from(f, a)), canonical_string(c));
    EXPECT_EQ(config_hash(algo_config_from(f, a)), config_hash(c));
  }
}

TEST(Manifest, ValidationAndGridSize) {
  ExperimentManifest m = tiny_manifest("validate", {Algo::ppo, Algo::trpo});
  m.lrs = {1e-4, 3e-4, 1e-3};
  m.deltas = {0.01, 0.02};
  m.seeds = {1, 2, 3};
  const auto cells = enumerate_cells(m);
  EXPECT_EQ(enumerate_jobs(m, cells).size(), (3u + 2u) * 3u);
  m.seeds.clear();
  EXPECT_THROW(run_experiment(m), ConfigError);
  EXPECT_FALSE(fs::exists(m.out_dir + "/runs"));
  m.seeds = {1, 1};
  EXPECT_THROW(validate(m), ConfigError);
  m.seeds = {1};
  m.lrs = {-1.0};
  EXPECT_THROW(validate(m), ConfigError);
}

TEST(Manifest, JsonRoundTripKeepsHash) {
  ExperimentManifest m = tiny_manifest("json", {Algo::ppo, Algo::trpo_plus});
  m.ablate = {"value_clip"};
  m.lrs = {1e-4};
  const ExperimentManifest back = ExperimentManifest::from_json(m.to_json());
  EXPECT_EQ(back.hash(), m.hash());
  m.iterations += 1;
  EXPECT_NE(back.hash(), m.hash());
}

class TinyExperiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    manifest_ = tiny_manifest("four", {Algo::ppo, Algo::ppo_m, Algo::trpo, Algo::trpo_plus});
    first_ = run_experiment(manifest_);
  }
  static ExperimentManifest manifest_;
  static ExperimentResult first_;
};
ExperimentManifest TinyExperiment::manifest_;
ExperimentResult TinyExperiment::first_;

TEST_F(TinyExperiment, TrainsEveryRunOnce) {
  EXPECT_EQ(first_.trained, 8);
  EXPECT_EQ(first_.failed, 0);
  EXPECT_EQ(first_.summary.at("selected_agents").get<int>(), 8);
  EXPECT_TRUE(first_.summary.at("complete").get<bool>());
  for (const auto& c : first_.summary.at("cells")) {
    EXPECT_LE(c.at("ci_lo").get<double>(), c.at("mean").get<double>());
    EXPECT_LE(c.at("mean").get<double>(), c.at("ci_hi").get<double>());
  }
}

TEST_F(TinyExperiment, AaiAcliRecomputedFromRunCsvs) {
  std::map<std::string, double> means;
  for (const auto& c : first_.summary.at("cells")) {
    std::vector<double> finals;
    for (const auto& s : c.at("selected")) {
      const std::string dir = run_dir(manifest_.out_dir, s.at("run").get<std::string>());
      const auto rows = read_metrics_csv(dir + "/metrics.csv");
      // Independent estimator: mean of the last 10 rows' rewards.
      const std::size_t from = rows.size() > 10 ? rows.size() - 10 : 0;
      double sum = 0.0;
      for (std::size_t i = from; i < rows.size(); ++i) sum += rows[i].mean_raw_episode_reward;
      finals.push_back(sum / static_cast<double>(rows.size() - from));
    }
    double m = 0.0;
    for (double f : finals) m += f;
    means[c.at("algo").get<std::string>()] = m / static_cast<double>(finals.size());
  }
  const double aai = std::max(std::abs(means["ppo"] - means["trpo-plus"]),
                              std::abs(means["ppo-m"] - means["trpo"]));
  const double acli = std::max(std::abs(means["ppo"] - means["ppo-m"]),
                               std::abs(means["trpo-plus"] - means["trpo"]));
  EXPECT_EQ(first_.summary.at("aai").get<double>(), aai);
  EXPECT_EQ(first_.summary.at("acli").get<double>(), acli);
}

TEST_F(TinyExperiment, ResumesOnlyDeletedRun) {
  const std::string key = first_.summary.at("cells")[1].at("selected")[0].at("run");
  const std::string dir = run_dir(manifest_.out_dir, key);
  const std::string metrics_before = slurp(dir + "/metrics.csv");
  const std::string summary_before = slurp(manifest_.out_dir + "/summary.json");
  fs::remove_all(dir);
  const ExperimentResult again = run_experiment(manifest_);
  EXPECT_EQ(again.trained, 1);
  EXPECT_EQ(again.skipped, 7);
  EXPECT_EQ(slurp(dir + "/metrics.csv"), metrics_before);
  EXPECT_EQ(slurp(manifest_.out_dir + "/summary.json"), summary_before);
}

TEST_F(TinyExperiment, FreshRerunIsByteIdentical) {
  ExperimentManifest copy = manifest_;
  copy.out_dir += "_rerun";
  fs::remove_all(copy.out_dir);
  copy.workers = 2;
  run_experiment(copy);
  const auto a = tree(manifest_.out_dir);
  const auto b = tree(copy.out_dir);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [path, bytes] : a) {
    if (path.find("timing.csv") != std::string::npos) continue;
    if (path.rfind("report", 0) == 0) continue;
    ASSERT_TRUE(b.count(path)) << path;
    EXPECT_EQ(bytes, b.at(path)) << path;
  }
}

TEST_F(TinyExperiment, ReportIsDeterministicAndComplete) {
  emit_report(manifest_.out_dir);
  const auto first = tree(manifest_.out_dir + "/report");
  emit_report(manifest_.out_dir);
  EXPECT_EQ(tree(manifest_.out_dir + "/report"), first);
  for (const char* f : {"table.md", "table.csv", "histogram.csv", "diagnostics.csv"}) {
    EXPECT_TRUE(first.count(f)) << f;
  }
  const std::string md = first.at("table.md");
  EXPECT_NE(md.find("AAI"), std::string::npos);
  EXPECT_NE(md.find("ACLI"), std::string::npos);
}

TEST(Report, TwoAlgosTwoSeedsGiveTwoRows) {
  ExperimentManifest m = tiny_manifest("two", {Algo::ppo, Algo::trpo});
  run_experiment(m);
  emit_report(m.out_dir);
  const csv::Table t(csv::read_file(m.out_dir + "/report/table.csv"));
  ASSERT_EQ(t.size(), 2u);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(t.at(i, "seeds"), "2");
    EXPECT_FALSE(t.at(i, "ci_lo").empty());
    EXPECT_FALSE(t.at(i, "ci_hi").empty());
    EXPECT_LE(t.number(i, "ci_lo"), t.number(i, "mean"));
    EXPECT_LE(t.number(i, "mean"), t.number(i, "ci_hi"));
  }
}

TEST(Report, HistogramPartitionsSumToAgents) {
  ExperimentManifest m = tiny_manifest("ablate", {Algo::ppo});
  m.ablate = {"value_clip", "lr_anneal"};
  m.iterations = 2;
  const ExperimentResult r = run_experiment(m);
  EXPECT_EQ(r.summary.at("configs").get<int>(), 4);
  EXPECT_EQ(r.summary.at("selected_agents").get<int>(), 8);
  EXPECT_TRUE(r.summary.at("aai").is_null());
  const csv::Table t(csv::read_file(m.out_dir + "/histogram.csv"));
  std::map<std::string, int> per_partition;
  std::map<std::string, int> per_group;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const int n = static_cast<int>(t.number(i, "count"));
    per_partition[t.at(i, "partition")] += n;
    per_group[t.at(i, "partition") + "/" + t.at(i, "group")] += n;
  }
  ASSERT_EQ(per_partition.size(), 2u);
  for (const auto& [p, n] : per_partition) EXPECT_EQ(n, 8) << p;
  for (const auto& [g, n] : per_group) EXPECT_EQ(n, 4) << g;
}

TEST(ShippedConfigs, EverySectionValidates) {
  const fs::path dir = fs::path(POLGRAD_SOURCE_DIR) / "configs";
  int files = 0;
  for (const char* name : {"pendulum", "pointgoal", "walker2d", "humanoid", "hopper"}) {
    const ConfigFile f = load_config_file((dir / (std::string(name) + ".cfg")).string());
    ++files;
    for (Algo a : {Algo::ppo, Algo::ppo_m, Algo::ppo_noclip, Algo::trpo, Algo::trpo_plus}) {
      ASSERT_TRUE(f.has(to_string(a))) << name << " " << to_string(a);
      EXPECT_NO_THROW(validate(algo_config_from(f, a))) << name << " " << to_string(a);
    }
  }
  EXPECT_EQ(files, 5);
}

TEST(ShippedConfigs, TableRowsTranscribed) {
  const fs::path dir = fs::path(POLGRAD_SOURCE_DIR) / "configs";
  const ConfigFile walker = load_config_file((dir / "walker2d.cfg").string());
  const AlgoConfig noclip = algo_config_from(walker, Algo::ppo_noclip);
  EXPECT_EQ(noclip.gae_lambda, 0.85);
  EXPECT_EQ(noclip.policy_lr, 7.25e-05);
  EXPECT_EQ(noclip.entropy_coeff, -0.01);
  EXPECT_EQ(noclip.opts.reward_clip_range.hi, 30.0);
  EXPECT_EQ(noclip.opts.reward_scaling_mode, RewardScaling::rewards);
  EXPECT_EQ(algo_config_from(walker, Algo::trpo_plus).kl_constraint, 0.07);
  const ConfigFile hopper = load_config_file((dir / "hopper.cfg").string());
  EXPECT_EQ(algo_config_from(hopper, Algo::trpo).kl_constraint, 0.13);
  EXPECT_EQ(algo_config_from(hopper, Algo::ppo_noclip).opts.grad_clip_norm, 4.0);
  const ConfigFile humanoid = load_config_file((dir / "humanoid.cfg").string());
  EXPECT_EQ(algo_config_from(humanoid, Algo::ppo).policy_lr, 0.00015);
  EXPECT_EQ(algo_config_from(humanoid, Algo::trpo_plus).gae_lambda, 0.85);
}

TEST(ShippedConfigs, MetaSection) {
  ExperimentManifest m;
  apply_meta(m, load_config_file(std::string(POLGRAD_SOURCE_DIR) + "/configs/pendulum.cfg"));
  EXPECT_EQ(m.env, EnvId::pendulum);
  EXPECT_EQ(m.iterations, 300);
  EXPECT_EQ(m.seeds, (std::vector<std::uint64_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(m.lrs, (std::vector<double>{0.0003, 0.001}));
  EXPECT_THROW(apply_meta(m, parse_config_text("version = 1\n[meta]\ncolor = red\n")), ConfigError);
  EXPECT_THROW(parse_seeds("5..2"), ConfigError);
  EXPECT_THROW(parse_seeds("x"), ConfigError);
  EXPECT_EQ(parse_seeds("4, 9"), (std::vector<std::uint64_t>{4, 9}));
}
