#include <cmath>
#include <numbers>

#include "voltrl/ppo.hpp"

namespace voltrl {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5·log(2π)
const double kHiddenGain = std::numbers::sqrt2;
constexpr double kActorOutputGain = 0.01;
constexpr double kCriticOutputGain = 1.0;

std::vector<int> decentralized_sizes() { return {2, 4, 4, 2}; }
std::vector<int> centralized_sizes(int n) { return {2 * n, 64, 64, 2 * n}; }

}  // namespace

std::string to_string(PolicyMode mode) {
  return mode == PolicyMode::kDecentralized ? "decentralized" : "centralized";
}

PolicyMode parse_policy_mode(std::string_view text) {
  if (text == "decentralized") return PolicyMode::kDecentralized;
  if (text == "centralized") return PolicyMode::kCentralized;
  throw std::invalid_argument("unknown policy mode \"" + std::string(text) + "\"");
}

PolicySet::PolicySet(std::size_t num_agents, PolicyMode mode, nn::Rng& rng, double log_std_init)
    : num_agents_(num_agents), mode_(mode) {
  if (num_agents == 0) throw std::invalid_argument("a policy set needs at least one agent");
  const int n = static_cast<int>(num_agents);
  if (mode == PolicyMode::kDecentralized) {
    for (int i = 0; i < n; ++i) {
      blocks_.push_back({nn::Mlp::orthogonal(decentralized_sizes(), kHiddenGain, kActorOutputGain, rng), 2 * i, 2 * i});
    }
  } else {
    blocks_.push_back({nn::Mlp::orthogonal(centralized_sizes(n), kHiddenGain, kActorOutputGain, rng), 0, 0});
  }
  log_std_ = Eigen::VectorXd::Constant(2 * n, log_std_init);
}

std::size_t PolicySet::actor_parameter_count() const {
  std::size_t total = 0;
  for (const auto& b : blocks_) total += b.net.parameter_count();
  return total;
}

Eigen::MatrixXd PolicySet::mean(const Eigen::MatrixXd& observations) const {
  const auto dim = 2 * static_cast<Eigen::Index>(num_agents_);
  if (observations.rows() != dim) {
    throw nn::ShapeError("joint observation has " + std::to_string(observations.rows()) + " rows, expected " +
                         std::to_string(dim));
  }
  Eigen::MatrixXd out(dim, observations.cols());
  for (const auto& b : blocks_) {
    out.middleRows(b.out_offset, b.net.output_size()) =
        b.net.forward(observations.middleRows(b.in_offset, b.net.input_size()));
  }
  return out;
}

Eigen::MatrixXd gaussian_log_prob(const Eigen::MatrixXd& mean, const Eigen::VectorXd& log_std,
                                  const Eigen::MatrixXd& actions) {
  const auto agents = mean.rows() / 2;
  Eigen::MatrixXd out(agents, mean.cols());
  for (Eigen::Index b = 0; b < mean.cols(); ++b) {
    for (Eigen::Index i = 0; i < agents; ++i) {
      double lp = 0.0;
      for (Eigen::Index d = 2 * i; d < 2 * i + 2; ++d) {
        const double z = (actions(d, b) - mean(d, b)) / std::exp(log_std(d));
        lp += -0.5 * z * z - log_std(d) - kHalfLog2Pi;
      }
      out(i, b) = lp;
    }
  }
  return out;
}

Eigen::MatrixXd PolicySet::log_prob(const Eigen::MatrixXd& observations, const Eigen::MatrixXd& actions) const {
  return gaussian_log_prob(mean(observations), log_std_, actions);
}

PolicySet::Sample PolicySet::act(const Eigen::VectorXd& observation, bool stochastic, nn::Rng& rng) const {
  Sample s;
  const Eigen::VectorXd mu = mean(observation);
  s.raw = mu;
  if (stochastic) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index d = 0; d < s.raw.size(); ++d) s.raw(d) += std::exp(log_std_(d)) * normal(rng);
  }
  s.clipped = s.raw.cwiseMax(-1.0).cwiseMin(1.0);
  const Eigen::MatrixXd lp = gaussian_log_prob(mu, log_std_, s.raw);
  s.log_probs.assign(lp.data(), lp.data() + lp.size());
  return s;
}

bool operator==(const PolicySet& a, const PolicySet& b) {
  if (a.num_agents_ != b.num_agents_ || a.mode_ != b.mode_ || a.blocks_.size() != b.blocks_.size()) return false;
  if (a.log_std_.size() != b.log_std_.size() || a.log_std_ != b.log_std_) return false;
  for (std::size_t k = 0; k < a.blocks_.size(); ++k) {
    const auto& x = a.blocks_[k];
    const auto& y = b.blocks_[k];
    if (x.in_offset != y.in_offset || x.out_offset != y.out_offset || !(x.net == y.net)) return false;
  }
  return true;
}

Critic::Critic(std::size_t num_agents, nn::Rng& rng)
    : net_(nn::Mlp::orthogonal({2 * static_cast<int>(num_agents), 64, 64, 1}, kHiddenGain, kCriticOutputGain, rng)) {}

double Critic::value(const Eigen::VectorXd& observation) const { return net_.forward(observation)(0, 0); }

ActorCritic::ActorCritic(std::size_t num_agents, PolicyMode mode, std::uint64_t seed, const PpoConfig& config) {
  nn::Rng rng(derive_seed(seed, 0x1417, 0));
  policy = PolicySet(num_agents, mode, rng, config.log_std_init);
  critic = Critic(num_agents, rng);
  for (const auto& b : policy.blocks()) {
    actor_optimizers.emplace_back(b.net.parameter_count() + static_cast<std::size_t>(b.net.output_size()), config.adam);
  }
  critic_optimizer = nn::AdamState(critic.net().parameter_count(), config.adam);
}

Decision ActorCritic::decide(std::span<const AgentObservation> observations, bool stochastic, Rng& rng) const {
  const Eigen::VectorXd obs = joint_observation(observations);
  auto sample = policy.act(obs, stochastic, rng);
  Decision d;
  d.actions.resize(observations.size());
  for (std::size_t i = 0; i < observations.size(); ++i) {
    d.actions[i] = {sample.clipped(2 * i), sample.clipped(2 * i + 1)};
  }
  d.raw_action = std::move(sample.raw);
  d.log_probs = std::move(sample.log_probs);
  d.value = critic.value(obs);
  return d;
}

namespace {

bool same_adam(const nn::AdamState& a, const nn::AdamState& b) {
  return a.step == b.step && a.m.size() == b.m.size() && a.m == b.m && a.v == b.v &&
         a.config.learning_rate == b.config.learning_rate && a.config.beta1 == b.config.beta1 &&
         a.config.beta2 == b.config.beta2 && a.config.epsilon == b.config.epsilon;
}

}  // namespace

bool operator==(const ActorCritic& a, const ActorCritic& b) {
  if (!(a.policy == b.policy) || !(a.critic == b.critic)) return false;
  if (a.actor_optimizers.size() != b.actor_optimizers.size()) return false;
  for (std::size_t k = 0; k < a.actor_optimizers.size(); ++k) {
    if (!same_adam(a.actor_optimizers[k], b.actor_optimizers[k])) return false;
  }
  return same_adam(a.critic_optimizer, b.critic_optimizer);
}

}  // namespace voltrl
