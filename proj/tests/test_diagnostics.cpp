#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "polgrad/diagnostics.hpp"
#include "polgrad/serialize.hpp"
#include "polgrad/train.hpp"

using namespace polgrad;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("polgrad_diag_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

AlgoConfig small_config(Algo algo) {
  AlgoConfig c = default_algo_config(algo);
  c.timesteps = 256;
  c.policy_hidden = {16, 16};
  c.value_hidden = {16, 16};
  c.policy_epochs = 2;
  c.value_epochs = 2;
  return c;
}

RolloutBatch sample_batch(const GaussianPolicy& p, const ValueFunction& v, std::uint64_t seed) {
  EnvPipeline pipe(EnvId::pendulum, seed, PipelineConfig{});
  Rng rng(seed);
  return collect_rollout(p, v, pipe, 300, rng);
}

}  // namespace

TEST(TrainMetrics, IdentityPolicies) {
  const AlgoConfig c = small_config(Algo::ppo);
  const GaussianPolicy p = build_policy(c, 3, 1, 1);
  const RolloutBatch b = sample_batch(p, build_value(c, 3, 2), 3);
  const TrainMetrics m = train_metrics(b, p, p);
  EXPECT_EQ(m.max_ratio, 1.0);
  EXPECT_EQ(m.mean_kl, 0.0);
  EXPECT_EQ(m.max_kl, 0.0);
  EXPECT_FALSE(m.ratio_overflow);
}

TEST(TrainMetrics, MeanBelowMaxAndPositive) {
  const AlgoConfig c = small_config(Algo::ppo);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const GaussianPolicy old = build_policy(c, 3, 1, 10 + trial);
    GaussianPolicy p = old;
    ParamVector theta = p.flatten();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += 0.05 * rng.normal();
    p.unflatten(theta);
    const RolloutBatch b = sample_batch(old, build_value(c, 3, 2), 100 + trial);
    const TrainMetrics m = train_metrics(b, p, old);
    EXPECT_GT(m.mean_kl, 0.0);
    EXPECT_LE(m.mean_kl, m.max_kl);
    EXPECT_GT(m.max_ratio, 0.0);
  }
}

TEST(TrainMetrics, EmptyBatchIsContractError) {
  const GaussianPolicy p = build_policy(small_config(Algo::ppo), 3, 1, 1);
  EXPECT_THROW(train_metrics(RolloutBatch{}, p, p), ContractError);
}

TEST(HeldoutMetrics, EmptyAndIdentity) {
  const AlgoConfig c = small_config(Algo::ppo);
  const GaussianPolicy p = build_policy(c, 3, 1, 1);
  EnvPipeline live(EnvId::pendulum, 4, pipeline_config(c));
  Rng rng(1);
  EXPECT_THROW(heldout_metrics(p, p, live, 1, rng), ContractError);
  const EnvPipeline frozen = live.frozen_copy(5);
  EXPECT_FALSE(heldout_metrics(p, p, frozen, 0, rng).has_value());
  const auto h = heldout_metrics(p, p, frozen, 2, rng);
  ASSERT_TRUE(h.has_value());
  EXPECT_EQ(h->mean_kl, 0.0);
  EXPECT_EQ(h->max_ratio, 1.0);
}

TEST(HeldoutMetrics, AgreesWithTrainBatchAcrossRepeats) {
  // A TRPO agent trained for a while, then 20 independent one-step repeats.
  AlgoConfig c = small_config(Algo::trpo);
  c.timesteps = 1000;
  RunSpec spec;
  spec.config = c;
  spec.seed = 3;
  spec.iterations = 15;
  spec.heldout_trajectories = 0;
  const RunResult base = train_run(spec);
  ASSERT_FALSE(base.diverged);

  std::vector<double> train_kl, held_kl;
  for (std::uint64_t r = 0; r < 20; ++r) {
    GaussianPolicy p = base.policy;
    ValueFunction v = base.value;
    EnvPipeline pipe(EnvId::pendulum, 1000 + r, pipeline_config(c));
    Rng rng(2000 + r);
    RolloutBatch batch = collect_rollout(p, v, pipe, c.timesteps, rng);
    compute_gae(batch, c.gamma, c.gae_lambda);
    const GaussianPolicy old = p;
    OptimState opt{AdamState(p.param_count(), c.policy_lr, LrSchedule::constant),
                   AdamState(v.net().param_count(), c.value_lr, LrSchedule::constant)};
    trpo_step(batch, p, v, step_config(c), c.kl_constraint, opt, 0, 1, rng);
    train_kl.push_back(train_metrics(batch, p, old).mean_kl);
    held_kl.push_back(heldout_metrics(p, old, pipe.frozen_copy(3000 + r), 5, rng)->mean_kl);
  }
  auto mean = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
  };
  std::vector<double> diff;
  for (std::size_t i = 0; i < train_kl.size(); ++i) diff.push_back(train_kl[i] - held_kl[i]);
  const double md = mean(diff);
  double var = 0.0;
  for (double d : diff) var += (d - md) * (d - md);
  const double se = std::sqrt(var / (diff.size() - 1) / diff.size());
  EXPECT_LT(std::abs(md), 3.0 * se + 1e-12) << "train " << mean(train_kl) << " heldout " << mean(held_kl);
}

TEST(MetricsRecord, RatioViolationFromRecordAlone) {
  MetricsRecord r;
  r.clip_eps = 0.2;
  r.max_ratio = 1.2;
  EXPECT_FALSE(r.ratio_violation());
  r.max_ratio = 1.2000001;
  EXPECT_TRUE(r.ratio_violation());
}

TEST(MetricsCsv, RoundTrip) {
  MetricsRecord a;
  a.iteration = 3;
  a.seed = 42;
  a.algo = "trpo";
  a.config_hash = "abc";
  a.manifest_hash = "def";
  a.mean_raw_episode_reward = -1234.5678901234567;
  a.max_ratio = 1.0 / 3.0;
  a.mean_kl = 1e-7;
  a.max_kl = 2e-7;
  a.trpo_delta = 0.01;
  a.step_accepted = false;
  a.policy_loss = -0.1;
  a.grad_clip_events = 4;
  MetricsRecord b = a;
  b.iteration = 4;
  b.heldout_mean_kl = 0.003;
  b.heldout_max_ratio = 1.5;
  b.step_kl = 0.0099;
  const fs::path path = fresh_dir("csv") / "metrics.csv";
  write_metrics_csv(path.string(), {a, b});
  const auto back = read_metrics_csv(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(metrics_csv_row(back[0]), metrics_csv_row(a));
  EXPECT_EQ(metrics_csv_row(back[1]), metrics_csv_row(b));
  EXPECT_FALSE(back[0].heldout_mean_kl.has_value());
  EXPECT_EQ(back[0].max_ratio, a.max_ratio);
}

TEST(Recompute, DumpedBatchesReproduceMetricsBitForBit) {
  for (Algo algo : {Algo::ppo, Algo::trpo}) {
    const fs::path dir = fresh_dir("dump_" + to_string(algo));
    RunSpec spec;
    spec.config = small_config(algo);
    spec.seed = 7;
    spec.iterations = 4;
    spec.dump_dir = dir.string();
    const RunResult r = train_run(spec);
    ASSERT_EQ(r.metrics.size(), 4u);
    for (const auto& rec : r.metrics) {
      const std::string stem = (dir / iteration_tag(rec.iteration)).string();
      const RolloutBatch b = read_batch_csv(stem + "_batch.csv");
      const TrainMetrics m = train_metrics(b, load_policy(stem + "_policy_new.bin"),
                                           load_policy(stem + "_policy_old.bin"));
      EXPECT_EQ(m.max_ratio, rec.max_ratio);
      EXPECT_EQ(m.mean_kl, rec.mean_kl);
      EXPECT_EQ(m.max_kl, rec.max_kl);
      EXPECT_GE(rec.mean_kl, 0.0);
      EXPECT_LE(rec.mean_kl, rec.max_kl);
      if (is_trpo_family(algo) && rec.step_accepted) {
        EXPECT_LE(rec.mean_kl, *rec.trpo_delta);
      }
    }
  }
}
