#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "oracles.hpp"
#include "voltrl/ppo.hpp"

using namespace voltrl;

namespace {

const std::string kData = VOLTRL_DATA_DIR;

void scramble(PolicySet& policy, nn::Rng& rng, double scale = 0.8) {
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& b : policy.blocks()) {
    auto& p = b.net.mutable_parameters();
    for (Eigen::Index k = 0; k < p.size(); ++k) p(k) = normal(rng);
  }
  for (Eigen::Index k = 0; k < policy.log_std().size(); ++k) policy.log_std()(k) = -0.7 + 0.2 * normal(rng);
}

Minibatch random_batch(const PolicySet& policy, int size, nn::Rng& rng, double ratio_noise = 0.3) {
  const auto n = static_cast<Eigen::Index>(policy.num_agents());
  std::normal_distribution<double> normal(0.0, 1.0);
  Minibatch b;
  b.observations.resize(2 * n, size);
  for (Eigen::Index k = 0; k < b.observations.size(); ++k) b.observations.data()[k] = normal(rng);
  b.actions = policy.mean(b.observations);
  const Eigen::VectorXd sigma = policy.log_std().array().exp();
  for (Eigen::Index c = 0; c < size; ++c) {
    for (Eigen::Index r = 0; r < 2 * n; ++r) b.actions(r, c) += sigma(r) * normal(rng);
  }
  b.old_log_probs = policy.log_prob(b.observations, b.actions);
  for (Eigen::Index k = 0; k < b.old_log_probs.size(); ++k) b.old_log_probs.data()[k] += ratio_noise * normal(rng);
  b.advantages.resize(size);
  b.returns.resize(size);
  for (int k = 0; k < size; ++k) {
    b.advantages(k) = normal(rng);
    b.returns(k) = normal(rng);
  }
  return b;
}

Transition make_step(double reward, double value, bool done, std::size_t agents = 1) {
  Transition t;
  t.observation = Eigen::VectorXd::Zero(2 * static_cast<Eigen::Index>(agents));
  t.action = Eigen::VectorXd::Zero(2 * static_cast<Eigen::Index>(agents));
  t.log_probs.assign(agents, 0.0);
  t.reward = reward;
  t.value = value;
  t.done = done;
  return t;
}

// Flattened actor parameters for one block: [network; block log-std slice].
Eigen::VectorXd block_vector(const PolicySet& p, std::size_t k) {
  const auto& b = p.blocks()[k];
  Eigen::VectorXd v(b.net.parameter_count() + b.net.output_size());
  v << b.net.parameters(), p.log_std().segment(b.out_offset, b.net.output_size());
  return v;
}

void set_block_vector(PolicySet& p, std::size_t k, const Eigen::VectorXd& v) {
  auto& b = p.blocks()[k];
  const auto np = static_cast<Eigen::Index>(b.net.parameter_count());
  b.net.set_parameters(v.head(np));
  p.log_std().segment(b.out_offset, b.net.output_size()) = v.tail(b.net.output_size());
}

TrainConfig small_config() {
  TrainConfig c;
  c.iterations = 2;
  c.ppo.steps_per_update = 200;
  c.ppo.epochs = 2;
  c.ppo.batch_size = 64;
  return c;
}

}  // namespace

TEST(Gae, SingleStepEpisode) {
  ExperienceBuffer buf;
  buf.record(make_step(2.0, 0.5, true));
  const auto est = compute_gae(buf, 0.99, 0.95);
  EXPECT_DOUBLE_EQ(est.advantages(0), 1.5);
  EXPECT_DOUBLE_EQ(est.returns(0), 2.0);
}

TEST(Gae, UnitLambdaGammaIsMonteCarloReturnMinusValue) {
  ExperienceBuffer buf;
  const std::vector<double> rewards{0.3, -1.0, 2.5, 0.7};
  const std::vector<double> values{0.1, 0.2, -0.4, 0.9};
  for (std::size_t t = 0; t < 4; ++t) buf.record(make_step(rewards[t], values[t], t == 3));
  const auto est = compute_gae(buf, 1.0, 1.0);
  double g = 0.0;
  for (int t = 3; t >= 0; --t) {
    g += rewards[static_cast<std::size_t>(t)];
    EXPECT_NEAR(est.advantages(t), g - values[static_cast<std::size_t>(t)], 1e-14);
    EXPECT_NEAR(est.returns(t), g, 1e-14);
  }
}

TEST(Gae, HandComputedThreeStepsAndEpisodeBoundary) {
  ExperienceBuffer buf;
  buf.record(make_step(1.0, 0.5, false));
  buf.record(make_step(2.0, 0.4, false));
  buf.record(make_step(3.0, 0.3, true));
  buf.record(make_step(10.0, 7.0, true));
  const auto est = compute_gae(buf, 0.9, 0.8);
  EXPECT_NEAR(est.advantages(2), 2.7, 1e-14);
  EXPECT_NEAR(est.advantages(1), 3.814, 1e-14);
  EXPECT_NEAR(est.advantages(0), 3.60608, 1e-14);
  EXPECT_NEAR(est.advantages(3), 3.0, 1e-14);
  EXPECT_NEAR(est.returns(0), 4.10608, 1e-14);
}

TEST(Gae, IncompleteEpisodeIsRejected) {
  ExperienceBuffer buf;
  buf.record(make_step(1.0, 0.0, false));
  EXPECT_THROW(compute_gae(buf, 0.99, 0.95), InsufficientDataError);
}

TEST(Normalize, ZeroMeanUnitVariance) {
  Eigen::VectorXd v(5);
  v << 1.0, 4.0, -2.0, 0.5, 3.0;
  const auto z = normalize(v);
  EXPECT_NEAR(z.mean(), 0.0, 1e-15);
  EXPECT_NEAR((z.array() - z.mean()).square().mean(), 1.0, 1e-7);
}

TEST(PolicySet, ParameterCountsAndBlockLayout) {
  nn::Rng rng(1);
  const PolicySet dec(16, PolicyMode::kDecentralized, rng);
  EXPECT_EQ(dec.actor_parameter_count(), 672u);
  ASSERT_EQ(dec.blocks().size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(dec.blocks()[i].net.sizes(), (std::vector<int>{2, 4, 4, 2}));
    EXPECT_EQ(dec.blocks()[i].in_offset, static_cast<int>(2 * i));
  }
  const PolicySet cen(16, PolicyMode::kCentralized, rng);
  EXPECT_EQ(cen.actor_parameter_count(), 8352u);
  EXPECT_NEAR(dec.log_std()(0), std::log(0.5), 1e-15);
  const Critic critic(16, rng);
  EXPECT_EQ(critic.net().sizes(), (std::vector<int>{32, 64, 64, 1}));
}

TEST(PolicySet, LogProbMatchesGaussianDensity) {
  nn::Rng rng(2);
  PolicySet p(3, PolicyMode::kDecentralized, rng);
  scramble(p, rng);
  const auto b = random_batch(p, 5, rng);
  const auto lp = p.log_prob(b.observations, b.actions);
  const auto mean = p.mean(b.observations);
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < 3; ++i) {
      double ref = 0.0;
      for (int d = 0; d < 2; ++d) {
        const double s = std::exp(p.log_std()(2 * i + d));
        const double z = (b.actions(2 * i + d, c) - mean(2 * i + d, c)) / s;
        ref += -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * M_PI);
      }
      EXPECT_NEAR(lp(i, c), ref, 1e-12);
    }
  }
}

TEST(PolicySet, DeterministicActionIsTheClippedMean) {
  nn::Rng rng(3);
  PolicySet p(2, PolicyMode::kDecentralized, rng);
  scramble(p, rng, 3.0);
  Eigen::VectorXd obs(4);
  obs << 0.5, -2.0, 1.0, 3.0;
  const auto s = p.act(obs, false, rng);
  const Eigen::VectorXd mean = p.mean(obs);
  EXPECT_EQ(s.raw, mean);
  EXPECT_EQ(s.clipped, mean.cwiseMax(-1.0).cwiseMin(1.0));
}

TEST(PpoLoss, UnitRatioGivesNegativeMeanAdvantage) {
  nn::Rng rng(4);
  PolicySet p(2, PolicyMode::kDecentralized, rng);
  const Critic critic(2, rng);
  auto b = random_batch(p, 8, rng, 0.0);
  const auto r = ppo_loss(p, critic, b, {});
  EXPECT_NEAR(r.policy_loss, -b.advantages.mean(), 1e-14);
  EXPECT_EQ(r.clip_fraction, 0.0);
  EXPECT_NEAR(r.approx_kl, 0.0, 1e-15);
}

TEST(PpoLoss, HandEvaluatedClipping) {
  nn::Rng rng(5);
  PolicySet p(1, PolicyMode::kDecentralized, rng);
  const Critic critic(1, rng);
  auto b = random_batch(p, 1, rng, 0.0);
  b.old_log_probs(0, 0) -= std::log(1.5);
  b.advantages(0) = 1.0;
  auto r = ppo_loss(p, critic, b, {});
  EXPECT_NEAR(r.policy_loss, -1.2, 1e-12);
  EXPECT_EQ(r.clip_fraction, 1.0);
  for (const auto& g : r.actor_gradients) EXPECT_TRUE(g.isZero(0.0));

  b.old_log_probs(0, 0) += std::log(1.5) - std::log(0.5);
  b.advantages(0) = -1.0;
  r = ppo_loss(p, critic, b, {});
  EXPECT_NEAR(r.policy_loss, 0.8, 1e-12);
  for (const auto& g : r.actor_gradients) EXPECT_TRUE(g.isZero(0.0));
}

TEST(PpoLoss, ZeroAdvantageGivesZeroPolicyGradient) {
  nn::Rng rng(6);
  PolicySet p(3, PolicyMode::kDecentralized, rng);
  scramble(p, rng);
  const Critic critic(3, rng);
  auto b = random_batch(p, 16, rng);
  b.advantages.setZero();
  const auto r = ppo_loss(p, critic, b, {});
  EXPECT_EQ(r.policy_loss, 0.0);
  for (const auto& g : r.actor_gradients) EXPECT_TRUE(g.isZero(0.0));
}

TEST(PpoLoss, ObjectiveRespectsTheClipBound) {
  nn::Rng rng(7);
  PpoConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    PolicySet p(2, PolicyMode::kDecentralized, rng);
    scramble(p, rng);
    const Critic critic(2, rng);
    const auto b = random_batch(p, 16, rng, 1.0);
    const auto r = ppo_loss(p, critic, b, cfg);
    const double pos = b.advantages.cwiseMax(0.0).mean();
    const double neg = (-b.advantages).cwiseMax(0.0).mean();
    EXPECT_GE(r.policy_loss, -(1.0 + cfg.clip_epsilon) * pos + (1.0 - cfg.clip_epsilon) * neg - 1e-12);
  }
}

TEST(PpoLoss, GradientsMatchCentralDifferences) {
  nn::Rng rng(8);
  PpoConfig cfg;
  cfg.entropy_coef = 0.01;
  for (auto mode : {PolicyMode::kDecentralized, PolicyMode::kCentralized}) {
    const int trials = mode == PolicyMode::kCentralized ? 2 : 10;
    for (int trial = 0; trial < trials; ++trial) {
      PolicySet p(3, mode, rng);
      scramble(p, rng, 0.5);
      Critic critic(3, rng);
      const auto b = random_batch(p, 12, rng, 0.15);
      const auto r = ppo_loss(p, critic, b, cfg);
      for (std::size_t k = 0; k < p.blocks().size(); ++k) {
        PolicySet probe = p;
        const auto f = [&](const Eigen::VectorXd& v) {
          set_block_vector(probe, k, v);
          return ppo_loss(probe, critic, b, cfg).total;
        };
        EXPECT_LE(oracle::gradient_mismatch(r.actor_gradients[k], oracle::central_difference(f, block_vector(p, k)),
                                            1e-4, 1e-7),
                  1.0);
      }
      Critic probe = critic;
      const auto fc = [&](const Eigen::VectorXd& v) {
        probe.net().set_parameters(v);
        return ppo_loss(p, probe, b, cfg).total;
      };
      EXPECT_LE(oracle::gradient_mismatch(r.critic_gradient, oracle::central_difference(fc, critic.net().parameters()),
                                          1e-4, 1e-7),
                1.0);
    }
  }
}

TEST(PpoLoss, UnitRatioGradientIsTheScoreFunctionEstimate) {
  nn::Rng rng(9);
  PolicySet p(2, PolicyMode::kDecentralized, rng);
  scramble(p, rng, 0.5);
  const Critic critic(2, rng);
  const auto b = random_batch(p, 32, rng, 0.0);
  const auto r = ppo_loss(p, critic, b, {});
  for (std::size_t k = 0; k < p.blocks().size(); ++k) {
    PolicySet probe = p;
    // −mean(A · Σ_i log π_i), differentiated numerically.
    const auto f = [&](const Eigen::VectorXd& v) {
      set_block_vector(probe, k, v);
      const Eigen::MatrixXd lp = probe.log_prob(b.observations, b.actions);
      return -(lp.colwise().sum().transpose().array() * b.advantages.array()).mean();
    };
    const auto ref = oracle::central_difference(f, block_vector(p, k));
    EXPECT_LE((r.actor_gradients[k] - ref).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(PpoLoss, RejectsShapeMismatch) {
  nn::Rng rng(10);
  PolicySet p(2, PolicyMode::kDecentralized, rng);
  const Critic critic(2, rng);
  auto b = random_batch(p, 4, rng);
  b.returns.resize(3);
  EXPECT_THROW(ppo_loss(p, critic, b, {}), nn::ShapeError);
}

namespace {

ExperienceBuffer collect_buffer(const NetworkModel& m, const ActorCritic& agent, int episodes, std::uint64_t seed) {
  ExperienceBuffer buf;
  GridEnv env(m);
  for (int e = 0; e < episodes; ++e) {
    Rng rng(seed + static_cast<std::uint64_t>(e));
    run_episode(env, agent, sample_scenario(m, seed + static_cast<std::uint64_t>(e)), true, &buf, rng);
  }
  return buf;
}

}  // namespace

TEST(PpoUpdate, DeterministicAndClearsTheBuffer) {
  const auto m = load_network(kData + "/feeder13.json");
  PpoConfig cfg;
  cfg.steps_per_update = 200;
  cfg.batch_size = 50;
  cfg.epochs = 2;
  ActorCritic a(m.num_agents(), PolicyMode::kDecentralized, 3, cfg);
  ActorCritic b = a;
  auto buf_a = collect_buffer(m, a, 2, 40);
  auto buf_b = buf_a;
  nn::Rng ra(1);
  nn::Rng rb(1);
  const auto ma = ppo_update(a, buf_a, cfg, ra);
  const auto mb = ppo_update(b, buf_b, cfg, rb);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(ma.policy_loss, mb.policy_loss);
  EXPECT_EQ(ma.gradient_steps, 8);
  EXPECT_TRUE(buf_a.empty());
  EXPECT_FALSE(a == ActorCritic(m.num_agents(), PolicyMode::kDecentralized, 3, cfg));
}

TEST(PpoUpdate, RemainderMinibatchIsIncluded) {
  const auto m = load_network(kData + "/two_bus.json");
  PpoConfig cfg;
  cfg.steps_per_update = 100;
  cfg.batch_size = 16;
  cfg.epochs = 1;
  ActorCritic a(m.num_agents(), PolicyMode::kDecentralized, 4, cfg);
  auto buf = collect_buffer(m, a, 1, 1);
  nn::Rng rng(2);
  EXPECT_EQ(ppo_update(a, buf, cfg, rng).gradient_steps, 7);
}

TEST(PpoUpdate, InsufficientDataLeavesTheAgentUnchanged) {
  const auto m = load_network(kData + "/feeder13.json");
  PpoConfig cfg;
  cfg.steps_per_update = 2048;
  ActorCritic a(m.num_agents(), PolicyMode::kDecentralized, 5, cfg);
  const ActorCritic before = a;
  auto buf = collect_buffer(m, a, 2, 1);
  nn::Rng rng(3);
  EXPECT_THROW(ppo_update(a, buf, cfg, rng), InsufficientDataError);
  EXPECT_TRUE(a == before);
  EXPECT_EQ(buf.size(), 200u);
}

TEST(PpoUpdate, DecentralizationSurvivesUpdates) {
  const auto m = load_network(kData + "/feeder13.json");
  PpoConfig cfg;
  cfg.steps_per_update = 100;
  cfg.batch_size = 32;
  cfg.epochs = 3;
  ActorCritic a(m.num_agents(), PolicyMode::kDecentralized, 6, cfg);
  nn::Rng rng(4);
  for (int k = 0; k < 3; ++k) {
    auto buf = collect_buffer(m, a, 1, 100 + static_cast<std::uint64_t>(k));
    ppo_update(a, buf, cfg, rng);
    EXPECT_EQ(decentralization_violations(a.policy, rng, 200), 0u);
  }
}

TEST(Decentralization, CentralizedPolicyIsDetected) {
  nn::Rng rng(5);
  const PolicySet cen(4, PolicyMode::kCentralized, rng);
  EXPECT_GT(decentralization_violations(cen, rng, 50), 0u);
  const PolicySet dec(4, PolicyMode::kDecentralized, rng);
  EXPECT_EQ(decentralization_violations(dec, rng, 50), 0u);
}

TEST(Train, ZeroIterationsReturnsTheInitialAgent) {
  const auto m = load_network(kData + "/feeder13.json");
  auto cfg = small_config();
  cfg.iterations = 0;
  const auto r = train(m, cfg, 7);
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(r.state.env_steps, 0);
  EXPECT_TRUE(r.state.agent == ActorCritic(m.num_agents(), PolicyMode::kDecentralized, 7, cfg.ppo));
}

TEST(Train, ReproducibleAndIndependentOfWorkers) {
  const auto m = load_network(kData + "/feeder13.json");
  auto cfg = small_config();
  const auto a = train(m, cfg, 11);
  const auto b = train(m, cfg, 11);
  cfg.workers = 3;
  const auto c = train(m, cfg, 11);
  EXPECT_TRUE(a.state.agent == b.state.agent);
  EXPECT_TRUE(a.state.agent == c.state.agent);
  ASSERT_EQ(a.metrics.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(a.metrics[k].mean_episode_reward, c.metrics[k].mean_episode_reward);
    EXPECT_EQ(a.metrics[k].policy_loss, c.metrics[k].policy_loss);
  }
  EXPECT_EQ(a.metrics[1].iteration, 2);
  EXPECT_EQ(a.metrics[1].env_steps, 400);
  EXPECT_EQ(a.metrics[0].constraint_violations, 0u);
  const auto d = train(m, small_config(), 12);
  EXPECT_FALSE(a.state.agent == d.state.agent);
}

TEST(Train, CallbackSeesEveryIteration) {
  const auto m = load_network(kData + "/two_bus.json");
  auto cfg = small_config();
  cfg.iterations = 3;
  cfg.audit_decentralization = true;
  std::vector<int> seen;
  train(m, cfg, 1, [&](const IterationMetrics& it) { seen.push_back(it.iteration); });
  EXPECT_EQ(seen, (std::vector<int>{1, 2, 3}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto m = load_network(kData + "/feeder13.json");
  const auto r = train(m, small_config(), 13);
  const auto path = std::filesystem::temp_directory_path() / "voltrl_test_checkpoint.json";
  save_checkpoint(r.state, path);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.agent == r.state.agent);
  EXPECT_EQ(back.seed, r.state.seed);
  EXPECT_EQ(back.iterations_done, 2);
  EXPECT_EQ(back.env_steps, r.state.env_steps);
  EXPECT_EQ(back.episodes_started, r.state.episodes_started);

  const auto scenarios = std::vector<Scenario>{sample_scenario(m, 1), sample_scenario(m, 2)};
  const auto e1 = evaluate(m, r.state.agent, scenarios, {}, {});
  const auto e2 = evaluate(m, back.agent, scenarios, {}, {});
  for (std::size_t k = 0; k < e1.size(); ++k) EXPECT_EQ(e1[k].episode_return, e2[k].episode_return);
}

TEST(Checkpoint, CentralizedRoundTrip) {
  nn::Rng rng(1);
  TrainState st;
  st.agent = ActorCritic(5, PolicyMode::kCentralized, 99);
  const auto back = checkpoint_from_json(nlohmann::json::parse(checkpoint_to_json(st).dump()));
  EXPECT_TRUE(back.agent == st.agent);
  EXPECT_EQ(back.agent.policy.mode(), PolicyMode::kCentralized);
}

TEST(Checkpoint, MissingFileNamesThePath) {
  try {
    load_checkpoint("/nonexistent/ckpt.json");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/ckpt.json"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptShapesAreRejected) {
  TrainState st;
  st.agent = ActorCritic(2, PolicyMode::kDecentralized, 1);
  auto j = checkpoint_to_json(st);
  j["policy"]["log_std"].erase(0);
  EXPECT_ANY_THROW(checkpoint_from_json(j));
}

TEST(Metrics, HeaderAndRowWidthsAgree) {
  std::ostringstream out;
  write_metrics_header(out);
  write_metrics_row(out, IterationMetrics{});
  std::istringstream in(out.str());
  std::string header;
  std::string row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(header.rfind("iteration,env_steps,mean_episode_reward,policy_loss,value_loss", 0), 0u);
}

TEST(Summary, AggregatesEpisodes) {
  EpisodeStats a;
  a.episode_return = 2.0;
  a.max_deviation = 0.04;
  a.final_max_deviation = 0.03;
  a.final_power_ratio = {1.0, 0.5, 0.9};
  a.final_total_ratio = 0.8;
  EpisodeStats b = a;
  b.episode_return = 4.0;
  b.max_deviation = 0.02;
  b.final_power_ratio = {0.2};
  b.final_total_ratio = 0.2;
  const std::vector<EpisodeStats> eps{a, b};
  const auto sum = summarize(eps);
  EXPECT_EQ(sum.episodes, 2);
  EXPECT_DOUBLE_EQ(sum.mean_return, 3.0);
  EXPECT_DOUBLE_EQ(sum.max_deviation, 0.04);
  EXPECT_DOUBLE_EQ(sum.mean_power_ratio, 0.5);
  EXPECT_DOUBLE_EQ(sum.median_bus_power_ratio, 0.7);
}
