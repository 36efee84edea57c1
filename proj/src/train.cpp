#include <algorithm>
#include <exception>
#include <memory>
#include <optional>
#include <ostream>
#include <thread>

#include "voltrl/ppo.hpp"

namespace voltrl {

namespace {

enum Stream : std::uint64_t {
  kScenarioStream = 1,
  kActionStream = 2,
  kUpdateStream = 3,
  kAuditStream = 4,
};

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct EpisodeOutcome {
  ExperienceBuffer buffer;
  std::optional<EpisodeStats> stats;  // empty when the episode aborted
  std::size_t violations = 0;
};

EpisodeOutcome run_training_episode(GridEnv& env, const ActorCritic& agent, const NetworkModel& model,
                                    const TrainConfig& config, std::uint64_t seed, long index) {
  EpisodeOutcome out;
  const auto k = static_cast<std::uint64_t>(index);
  const Scenario scenario = sample_scenario(model, derive_seed(seed, kScenarioStream, k), config.loads);
  Rng rng(derive_seed(seed, kActionStream, k));
  const std::size_t before = env.constraint_violations();
  try {
    out.stats = run_episode(env, agent, scenario, true, &out.buffer, rng);
  } catch (const EpisodeAbortedError&) {
    out.buffer.clear();
    out.stats.reset();
  }
  out.violations = env.constraint_violations() - before;
  return out;
}

// Runs episodes [first, first + count) and returns them in index order.
std::vector<EpisodeOutcome> collect(const NetworkModel& model, const ActorCritic& agent, const TrainConfig& config,
                                    std::uint64_t seed, long first, int count, GridEnv* persistent) {
  std::vector<EpisodeOutcome> outcomes(static_cast<std::size_t>(count));
  if (persistent != nullptr) {
    for (int j = 0; j < count; ++j) {
      outcomes[j] = run_training_episode(*persistent, agent, model, config, seed, first + j);
    }
    return outcomes;
  }
  const int workers = std::max(1, std::min(config.workers, count));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto work = [&](int w) {
    try {
      for (int j = w; j < count; j += workers) {
        GridEnv env(model, config.episode, config.reward);
        outcomes[j] = run_training_episode(env, agent, model, config, seed, first + j);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return outcomes;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) + index);
}

TrainResult train(const NetworkModel& model, const TrainConfig& config, std::uint64_t seed,
                  const IterationCallback& on_iteration) {
  config.episode.validate();
  config.reward.validate(model.num_agents());
  config.ppo.validate(config.episode.horizon);
  if (config.iterations < 0) throw std::invalid_argument("iteration budget must be non-negative");
  if (config.workers < 1) throw std::invalid_argument("workers must be positive");

  TrainResult result;
  TrainState& state = result.state;
  state.seed = seed;
  state.agent = ActorCritic(model.num_agents(), config.mode, seed, config.ppo);

  // Setpoints that persist across episodes tie each episode to its predecessor,
  // so that mode collects sequentially on one environment.
  std::unique_ptr<GridEnv> persistent;
  if (config.episode.init == SetpointInit::kPersist) {
    persistent = std::make_unique<GridEnv>(model, config.episode, config.reward);
  }

  const int horizon = config.episode.horizon;
  ExperienceBuffer buffer;
  for (int iter = 0; iter < config.iterations; ++iter) {
    IterationMetrics m;
    m.iteration = iter + 1;
    double return_sum = 0.0;
    while (buffer.size() < static_cast<std::size_t>(config.ppo.steps_per_update)) {
      const auto missing = static_cast<long>(config.ppo.steps_per_update) - static_cast<long>(buffer.size());
      const int count = static_cast<int>((missing + horizon - 1) / horizon);
      auto outcomes = collect(model, state.agent, config, seed, state.episodes_started, count, persistent.get());
      state.episodes_started += count;
      bool any_completed = false;
      for (auto& o : outcomes) {
        m.constraint_violations += o.violations;
        if (!o.stats) {
          ++m.aborted_episodes;
          continue;
        }
        ++m.episodes;
        any_completed = true;
        return_sum += o.stats->episode_return;
        m.max_voltage_deviation = std::max(m.max_voltage_deviation, o.stats->max_deviation);
        buffer.append(o.buffer);
      }
      if (!any_completed) {
        throw EpisodeAbortedError("all " + std::to_string(count) + " episodes of a collection round aborted");
      }
    }
    const std::size_t steps = buffer.size();
    m.mean_episode_reward = return_sum / m.episodes;
    m.mean_step_reward = return_sum / static_cast<double>(steps);
    state.env_steps += static_cast<long>(steps);
    m.env_steps = state.env_steps;

    Rng update_rng(derive_seed(seed, kUpdateStream, static_cast<std::uint64_t>(iter)));
    const UpdateMetrics u = ppo_update(state.agent, buffer, config.ppo, update_rng);
    m.policy_loss = u.policy_loss;
    m.value_loss = u.value_loss;
    m.clip_fraction = u.clip_fraction;
    m.mean_kl = u.approx_kl;
    m.entropy = u.entropy;
    if (config.audit_decentralization && config.mode == PolicyMode::kDecentralized) {
      Rng audit_rng(derive_seed(seed, kAuditStream, static_cast<std::uint64_t>(iter)));
      m.decentralization_violations = decentralization_violations(state.agent.policy, audit_rng, 10);
    }
    state.iterations_done = iter + 1;
    result.metrics.push_back(m);
    if (on_iteration) on_iteration(m);
  }
  return result;
}

void write_metrics_header(std::ostream& out) {
  out << "iteration,env_steps,mean_episode_reward,policy_loss,value_loss,clip_fraction,mean_kl,"
         "max_voltage_deviation,mean_step_reward,entropy,episodes,aborted_episodes,constraint_violations,"
         "decentralization_violations\n";
}

void write_metrics_row(std::ostream& out, const IterationMetrics& m) {
  const auto old_precision = out.precision(17);
  out << m.iteration << ',' << m.env_steps << ',' << m.mean_episode_reward << ',' << m.policy_loss << ','
      << m.value_loss << ',' << m.clip_fraction << ',' << m.mean_kl << ',' << m.max_voltage_deviation << ','
      << m.mean_step_reward << ',' << m.entropy << ',' << m.episodes << ',' << m.aborted_episodes << ','
      << m.constraint_violations << ',' << m.decentralization_violations << '\n';
  out.precision(old_precision);
}

EvaluationSummary summarize(std::span<const EpisodeStats> episodes) {
  EvaluationSummary s;
  s.episodes = static_cast<int>(episodes.size());
  if (episodes.empty()) return s;
  std::vector<double> ratios;
  double ratio_sum = 0.0;
  for (const auto& e : episodes) {
    s.mean_return += e.episode_return;
    s.max_deviation = std::max(s.max_deviation, e.max_deviation);
    s.final_max_deviation = std::max(s.final_max_deviation, e.final_max_deviation);
    ratio_sum += e.final_total_ratio;
    ratios.insert(ratios.end(), e.final_power_ratio.begin(), e.final_power_ratio.end());
  }
  s.mean_return /= static_cast<double>(episodes.size());
  s.mean_power_ratio = ratio_sum / static_cast<double>(episodes.size());
  if (!ratios.empty()) {
    std::sort(ratios.begin(), ratios.end());
    const std::size_t mid = ratios.size() / 2;
    s.median_bus_power_ratio = ratios.size() % 2 == 1 ? ratios[mid] : 0.5 * (ratios[mid - 1] + ratios[mid]);
  }
  return s;
}

std::vector<EpisodeStats> evaluate(const NetworkModel& model, const Controller& controller,
                                   std::span<const Scenario> scenarios, const EpisodeConfig& episode,
                                   const RewardConfig& reward, bool keep_trace) {
  std::vector<EpisodeStats> out;
  out.reserve(scenarios.size());
  GridEnv env(model, episode, reward);
  Rng unused(0);
  for (const auto& s : scenarios) out.push_back(run_episode(env, controller, s, false, nullptr, unused, keep_trace));
  return out;
}

}  // namespace voltrl
