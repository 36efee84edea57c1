#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "voltrl/env.hpp"
#include "voltrl/grid.hpp"
#include "voltrl/nn.hpp"

namespace voltrl {

enum class PolicyMode {
  /// n independent 2→4→4→2 actors, agent i reads only its own observation.
  kDecentralized,
  /// One fully connected 2n→64→64→2n actor (comparison baseline).
  kCentralized,
};

std::string to_string(PolicyMode mode);
PolicyMode parse_policy_mode(std::string_view text);

/// An actor network and the slice of the joint observation/action it owns.
struct ActorBlock {
  nn::Mlp net;
  int in_offset = 0;
  int out_offset = 0;
};

/// Gaussian policy over the joint action with a state-independent log-std per action dimension.
class PolicySet {
 public:
  PolicySet() = default;
  PolicySet(std::size_t num_agents, PolicyMode mode, nn::Rng& rng, double log_std_init = std::log(0.5));

  std::size_t num_agents() const { return num_agents_; }
  PolicyMode mode() const { return mode_; }
  const std::vector<ActorBlock>& blocks() const { return blocks_; }
  std::vector<ActorBlock>& blocks() { return blocks_; }
  const Eigen::VectorXd& log_std() const { return log_std_; }
  Eigen::VectorXd& log_std() { return log_std_; }

  /// Actor weights and biases; the log-std vector is counted separately.
  std::size_t actor_parameter_count() const;

  /// Action means, 2n x batch, for a 2n x batch observation matrix.
  Eigen::MatrixXd mean(const Eigen::MatrixXd& observations) const;

  struct Sample {
    Eigen::VectorXd raw;      // pre-clip
    Eigen::VectorXd clipped;  // in [−1, 1]
    std::vector<double> log_probs;  // per agent, of `raw`
  };
  /// Stochastic: raw ~ N(mean, exp(log_std)²). Deterministic: raw = mean.
  Sample act(const Eigen::VectorXd& observation, bool stochastic, nn::Rng& rng) const;

  /// Per-agent log densities (n x batch) of raw actions under the current policy.
  Eigen::MatrixXd log_prob(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& actions) const;

  friend bool operator==(const PolicySet&, const PolicySet&);

 private:
  friend PolicySet policy_from_json(const nlohmann::json&);
  std::size_t num_agents_ = 0;
  PolicyMode mode_ = PolicyMode::kDecentralized;
  std::vector<ActorBlock> blocks_;
  Eigen::VectorXd log_std_;
};

/// Per-agent Gaussian log density of `action` (2-vector slices summed).
Eigen::MatrixXd gaussian_log_prob(const Eigen::MatrixXd& mean, const Eigen::VectorXd& log_std,
                                  const Eigen::MatrixXd& actions);

/// Single centralized value function over the concatenated observations.
class Critic {
 public:
  Critic() = default;
  Critic(std::size_t num_agents, nn::Rng& rng);
  explicit Critic(nn::Mlp net) : net_(std::move(net)) {}

  const nn::Mlp& net() const { return net_; }
  nn::Mlp& net() { return net_; }
  double value(const Eigen::VectorXd& observation) const;

  friend bool operator==(const Critic& a, const Critic& b) { return a.net_ == b.net_; }

 private:
  nn::Mlp net_;
};

struct PpoConfig {
  int steps_per_update = 2048;
  int batch_size = 16;
  int epochs = 10;
  double clip_epsilon = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double entropy_coef = 0.0;
  double value_coef = 0.5;
  /// Per-optimizer gradient norm cap; 0 disables.
  double max_grad_norm = 0.5;
  bool normalize_advantages = true;
  double log_std_init = -0.69314718055994530942;  // log(0.5)
  nn::AdamConfig adam;

  void validate(int horizon) const;
};

/// Policy, critic and one Adam state per actor block plus one for the critic.
class ActorCritic : public Controller {
 public:
  ActorCritic() = default;
  ActorCritic(std::size_t num_agents, PolicyMode mode, std::uint64_t seed, const PpoConfig& config = {});

  Decision decide(std::span<const AgentObservation> observations, bool stochastic, Rng& rng) const override;

  PolicySet policy;
  Critic critic;
  std::vector<nn::AdamState> actor_optimizers;
  nn::AdamState critic_optimizer;

  friend bool operator==(const ActorCritic& a, const ActorCritic& b);
};

class ExperienceBuffer : public TransitionRecorder {
 public:
  void record(Transition transition) override { steps_.push_back(std::move(transition)); }
  void append(const ExperienceBuffer& other);
  void truncate(std::size_t size) { steps_.resize(std::min(size, steps_.size())); }
  void clear() { steps_.clear(); }

  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  /// True when the buffer ends on an episode boundary.
  bool complete() const { return steps_.empty() || steps_.back().done; }
  std::size_t num_episodes() const;
  const std::vector<Transition>& steps() const { return steps_; }

 private:
  std::vector<Transition> steps_;
};

struct AdvantageEstimate {
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;  // advantages + values, before any normalization
};

/// GAE(λ) with zero bootstrap at episode ends. Throws on an incomplete final episode.
AdvantageEstimate compute_gae(const ExperienceBuffer& buffer, double gamma, double lambda);

/// Shifts and scales to zero mean, unit variance (population std + 1e-8).
Eigen::VectorXd normalize(const Eigen::VectorXd& v);

struct Minibatch {
  Eigen::MatrixXd observations;   // 2n x B
  Eigen::MatrixXd actions;        // 2n x B, pre-clip
  Eigen::MatrixXd old_log_probs;  // n x B
  Eigen::VectorXd advantages;     // B
  Eigen::VectorXd returns;        // B
};

struct LossResult {
  double total = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;  // mean squared error, before the coefficient
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  /// Per actor block: gradient of `total` w.r.t. [network parameters, log-std of the block's outputs].
  std::vector<Eigen::VectorXd> actor_gradients;
  Eigen::VectorXd critic_gradient;
};

/// Clipped surrogate on the joint ratio, plus value_coef·MSE − entropy_coef·entropy, with exact gradients.
LossResult ppo_loss(const PolicySet& policy, const Critic& critic, const Minibatch& batch, const PpoConfig& config);

struct UpdateMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
  int gradient_steps = 0;
};

class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `epochs` passes of shuffled minibatch Adam steps over the buffer, then clears it.
UpdateMetrics ppo_update(ActorCritic& agent, ExperienceBuffer& buffer, const PpoConfig& config, nn::Rng& rng);

/// Number of (trial, agent) pairs whose deterministic action changed at all when
/// only other agents' observations were perturbed. Zero means exact decentralization.
std::size_t decentralization_violations(const PolicySet& policy, nn::Rng& rng, int trials);

// --- Training driver ------------------------------------------------------------

struct TrainConfig {
  PolicyMode mode = PolicyMode::kDecentralized;
  EpisodeConfig episode;
  RewardConfig reward;
  PpoConfig ppo;
  LoadDistribution loads;
  int iterations = 50;
  int workers = 1;
  /// Re-check structural decentralization after every update.
  bool audit_decentralization = false;
};

struct IterationMetrics {
  int iteration = 0;
  long env_steps = 0;
  double mean_episode_reward = 0.0;  // mean episode return Σ_t R_t
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double max_voltage_deviation = 0.0;
  double mean_step_reward = 0.0;
  double entropy = 0.0;
  int episodes = 0;
  int aborted_episodes = 0;
  std::size_t constraint_violations = 0;
  std::size_t decentralization_violations = 0;
};

struct TrainState {
  ActorCritic agent;
  std::uint64_t seed = 0;
  long episodes_started = 0;
  int iterations_done = 0;
  long env_steps = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<IterationMetrics> metrics;
};

using IterationCallback = std::function<void(const IterationMetrics&)>;

/// Alternates training-mode episodes and PPO updates for `config.iterations` iterations.
/// Deterministic in (model, config, seed) and independent of `config.workers`.
TrainResult train(const NetworkModel& model, const TrainConfig& config, std::uint64_t seed,
                  const IterationCallback& on_iteration = {});

/// Seed of the `index`-th draw of stream `stream` under the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

// --- Checkpoints and metrics files ----------------------------------------------

nlohmann::json policy_to_json(const PolicySet& policy);
PolicySet policy_from_json(const nlohmann::json& j);
nlohmann::json checkpoint_to_json(const TrainState& state);
TrainState checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const IterationMetrics& m);

// --- Evaluation ---------------------------------------------------------------

struct EvaluationSummary {
  int episodes = 0;
  double mean_return = 0.0;
  double max_deviation = 0.0;        // over all steps of all episodes
  double final_max_deviation = 0.0;  // worst steady-state deviation
  double mean_power_ratio = 0.0;     // mean over episodes of Σ P^c / Σ p_env at steady state
  double median_bus_power_ratio = 0.0;  // median over all (episode, bus) steady-state P^c / p_env
};

EvaluationSummary summarize(std::span<const EpisodeStats> episodes);

/// Deterministic rollouts of `controller` over `scenarios`.
std::vector<EpisodeStats> evaluate(const NetworkModel& model, const Controller& controller,
                                   std::span<const Scenario> scenarios, const EpisodeConfig& episode,
                                   const RewardConfig& reward, bool keep_trace = false);

}  // namespace voltrl
