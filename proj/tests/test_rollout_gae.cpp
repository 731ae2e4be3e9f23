#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "polgrad/config.hpp"
#include "polgrad/rollout.hpp"

using namespace polgrad;

namespace {

// Batch holding only the fields GAE reads.
RolloutBatch make_batch(const std::vector<double>& r, const std::vector<double>& v,
                        const std::vector<int>& done, const std::vector<int>& timeout,
                        const std::vector<double>& boot) {
  RolloutBatch b;
  const int T = static_cast<int>(r.size());
  b.obs = Matrix::Zero(1, T);
  b.actions = Matrix::Zero(1, T);
  b.raw_reward = r;
  b.learner_reward = r;
  b.log_prob_old.assign(T, 0.0);
  b.value_old = v;
  b.done = done;
  b.timeout = timeout;
  b.bootstrap_value = boot;
  return b;
}

// Independent expansion: A_t = sum_{k=t}^{end of segment} (gamma lambda)^{k-t} delta_k.
std::vector<double> brute_force_gae(const RolloutBatch& b, double gamma, double lambda) {
  const int T = b.size();
  std::vector<double> delta(T);
  for (int k = 0; k < T; ++k) {
    const bool end = b.done[k] || k == T - 1;
    double next = 0.0;
    if (!end) next = b.value_old[k + 1];
    else if (!(b.done[k] && !b.timeout[k])) next = b.bootstrap_value[k];
    delta[k] = b.learner_reward[k] + gamma * next - b.value_old[k];
  }
  std::vector<double> adv(T);
  for (int t = 0; t < T; ++t) {
    double a = 0.0;
    double w = 1.0;
    for (int k = t; k < T; ++k) {
      a += w * delta[k];
      if (b.done[k] || k == T - 1) break;
      w *= gamma * lambda;
    }
    adv[t] = a;
  }
  return adv;
}

RolloutBatch random_batch(Rng& rng) {
  std::vector<double> r, v, boot;
  std::vector<int> done, timeout;
  const int episodes = 1 + static_cast<int>(rng.below(3));
  for (int e = 0; e < episodes; ++e) {
    const int len = 1 + static_cast<int>(rng.below(20));
    // 0 terminal, 1 timeout, 2 cut by the batch end (last episode only).
    int ending = static_cast<int>(rng.below(3));
    if (ending == 2 && e + 1 < episodes) ending = 0;
    for (int i = 0; i < len; ++i) {
      const bool last = i == len - 1;
      r.push_back(rng.normal());
      v.push_back(rng.normal());
      done.push_back(last && ending < 2);
      timeout.push_back(last && ending == 1);
      boot.push_back(last && ending > 0 ? rng.normal() : 0.0);
    }
  }
  return make_batch(r, v, done, timeout, boot);
}

}  // namespace

TEST(Gae, HandExampleTerminal) {
  auto b = make_batch({1, 2, 3}, {0.5, 0.5, 0.5}, {0, 0, 1}, {0, 0, 0}, {0, 0, 0});
  compute_gae(b, 0.9, 0.8);
  const double d0 = 1 + 0.9 * 0.5 - 0.5, d1 = 2 + 0.9 * 0.5 - 0.5, d2 = 3 - 0.5;
  const double gl = 0.72;
  EXPECT_NEAR(b.advantage[2], d2, 1e-12);
  EXPECT_NEAR(b.advantage[1], d1 + gl * d2, 1e-12);
  EXPECT_NEAR(b.advantage[0], d0 + gl * d1 + gl * gl * d2, 1e-12);
  for (int t = 0; t < 3; ++t) EXPECT_NEAR(b.return_target[t], b.advantage[t] + 0.5, 1e-15);
}

TEST(Gae, MatchesBruteForce) {
  Rng rng(2024);
  for (int trial = 0; trial < 10000; ++trial) {
    RolloutBatch b = random_batch(rng);
    const double gamma = rng.uniform(0.0, 1.0), lambda = rng.uniform(0.0, 1.0);
    compute_gae(b, gamma, lambda);
    const auto expect = brute_force_gae(b, gamma, lambda);
    for (int t = 0; t < b.size(); ++t) {
      ASSERT_NEAR(b.advantage[t], expect[t], 1e-12) << "trial " << trial << " t " << t;
    }
  }
}

TEST(Gae, LambdaZeroIsTdResidual) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    RolloutBatch b = random_batch(rng);
    compute_gae(b, 0.97, 0.0);
    for (int t = 0; t < b.size(); ++t) {
      double next = 0.0;
      if (!b.segment_end(t)) next = b.value_old[t + 1];
      else if (!b.terminal(t)) next = b.bootstrap_value[t];
      EXPECT_EQ(b.advantage[t], b.learner_reward[t] + 0.97 * next - b.value_old[t]);
    }
  }
}

TEST(Gae, LambdaOneZeroValueIsDiscountedReturn) {
  Rng rng(6);
  std::vector<double> r(15);
  for (double& x : r) x = rng.normal();
  std::vector<int> done(15, 0), timeout(15, 0);
  done.back() = 1;
  auto b = make_batch(r, std::vector<double>(15, 0.0), done, timeout, std::vector<double>(15, 0.0));
  compute_gae(b, 0.9, 1.0);
  for (int t = 0; t < 15; ++t) {
    double g = 0.0;
    for (int k = 14; k >= t; --k) g = r[k] + 0.9 * g;
    EXPECT_NEAR(b.advantage[t], g, 1e-12);
  }
}

TEST(Gae, DoesNotCrossEpisodes) {
  auto b = make_batch({1, 1, 100}, {0, 0, 0}, {0, 1, 0}, {0, 0, 0}, {0, 0, 0});
  compute_gae(b, 0.99, 0.95);
  EXPECT_EQ(b.advantage[1], 1.0);
  EXPECT_NEAR(b.advantage[0], 1.0 + 0.99 * 0.95 * 1.0, 1e-15);
}

TEST(NormalizeAdvantages, Properties) {
  RolloutBatch b;
  b.raw_reward.assign(5, 0.0);
  b.advantage = {0.1, 0.1, 0.1, 0.1, 0.1};
  normalize_advantages(b);
  for (double a : b.advantage) EXPECT_EQ(a, 0.0);

  Rng rng(3);
  b.raw_reward.assign(100, 0.0);
  b.advantage.resize(100);
  for (double& a : b.advantage) a = rng.normal() * 5 + 2;
  const auto argmax = std::max_element(b.advantage.begin(), b.advantage.end()) - b.advantage.begin();
  normalize_advantages(b);
  double m = 0.0, s = 0.0;
  for (double a : b.advantage) m += a;
  m /= 100;
  for (double a : b.advantage) s += (a - m) * (a - m);
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt(s / 100), 1.0, 1e-9);
  EXPECT_EQ(std::max_element(b.advantage.begin(), b.advantage.end()) - b.advantage.begin(), argmax);
}

class RolloutTest : public ::testing::Test {
 protected:
  AlgoConfig cfg = default_algo_config(Algo::ppo);
  GaussianPolicy policy = build_policy(cfg, 3, 1, 1);
  ValueFunction value = build_value(cfg, 3, 2);
};

TEST_F(RolloutTest, SingleTransition) {
  EnvPipeline p(EnvId::pendulum, 4, pipeline_config(cfg));
  Rng rng(1);
  const RolloutBatch b = collect_rollout(policy, value, p, 1, rng);
  EXPECT_EQ(b.size(), 1);
  EXPECT_TRUE(b.segment_end(0));
  EXPECT_NE(b.bootstrap_value[0], 0.0);
  EXPECT_EQ(b.episode_starts, std::vector<int>{0});
}

TEST_F(RolloutTest, SameSeedSameBatch) {
  EnvPipeline p1(EnvId::pendulum, 4, pipeline_config(cfg)), p2(EnvId::pendulum, 4, pipeline_config(cfg));
  Rng r1(9), r2(9);
  const RolloutBatch a = collect_rollout(policy, value, p1, 450, r1);
  const RolloutBatch b = collect_rollout(policy, value, p2, 450, r2);
  EXPECT_EQ(a.obs, b.obs);
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.learner_reward, b.learner_reward);
  EXPECT_EQ(a.episode_returns.size(), 2u);
  EXPECT_EQ(a.episode_starts, (std::vector<int>{0, 200, 400}));
  EXPECT_EQ(a.timeout[199], 1);
  EXPECT_NE(a.bootstrap_value[199], 0.0);
}

TEST_F(RolloutTest, RawRewardsMatchReplay) {
  EnvPipeline p(EnvId::pendulum, 4, pipeline_config(cfg));
  Rng rng(3);
  const RolloutBatch b = collect_rollout(policy, value, p, 400, rng);
  Environment env(EnvId::pendulum, 4);
  env.reset();
  double total = 0.0;
  for (int t = 0; t < b.size(); ++t) {
    if (env.done()) env.reset();
    total += env.step(b.actions.col(t)).reward;
  }
  double from_batch = 0.0;
  for (double x : b.episode_returns) from_batch += x;
  EXPECT_NEAR(total, from_batch, 1e-9);
  EXPECT_NEAR(b.mean_episode_return(), from_batch / 2, 1e-9);
}

TEST_F(RolloutTest, CsvRoundTrip) {
  EnvPipeline p(EnvId::pendulum, 4, pipeline_config(cfg));
  Rng rng(3);
  RolloutBatch b = collect_rollout(policy, value, p, 64, rng);
  compute_gae(b, 0.99, 0.95);
  const auto path = (std::filesystem::temp_directory_path() / "polgrad_batch.csv").string();
  write_batch_csv(path, b);
  const RolloutBatch back = read_batch_csv(path);
  EXPECT_EQ(back.obs, b.obs);
  EXPECT_EQ(back.actions, b.actions);
  EXPECT_EQ(back.advantage, b.advantage);
  EXPECT_EQ(back.log_prob_old, b.log_prob_old);
  EXPECT_EQ(back.done, b.done);
}
