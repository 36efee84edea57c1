#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "voltrl/ppo.hpp"

namespace voltrl {

namespace {

constexpr double kHalfLog2PiE = 1.41893853320467274178;  // 0.5·(1 + log 2π)

Eigen::VectorXd clip_norm(Eigen::VectorXd g, double max_norm) {
  if (max_norm <= 0.0) return g;
  const double norm = g.norm();
  if (norm > max_norm) g *= max_norm / (norm + 1e-6);
  return g;
}

}  // namespace

void PpoConfig::validate(int horizon) const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid PPO config: " + what); };
  if (steps_per_update < horizon) fail("steps_per_update must be at least one episode (" + std::to_string(horizon) + ")");
  if (batch_size < 1) fail("batch_size must be positive");
  if (epochs < 1) fail("epochs must be positive");
  if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) fail("clip_epsilon must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must lie in [0, 1]");
  if (!(entropy_coef >= 0.0) || !(value_coef >= 0.0) || !(max_grad_norm >= 0.0)) {
    fail("coefficients must be non-negative");
  }
  if (!std::isfinite(log_std_init)) fail("log_std_init must be finite");
  if (!(adam.learning_rate > 0.0)) fail("learning rate must be positive");
}

void ExperienceBuffer::append(const ExperienceBuffer& other) {
  steps_.insert(steps_.end(), other.steps_.begin(), other.steps_.end());
}

std::size_t ExperienceBuffer::num_episodes() const {
  return static_cast<std::size_t>(std::count_if(steps_.begin(), steps_.end(), [](const Transition& t) { return t.done; }));
}

AdvantageEstimate compute_gae(const ExperienceBuffer& buffer, double gamma, double lambda) {
  if (!buffer.complete()) throw InsufficientDataError("experience buffer ends mid-episode");
  const auto& steps = buffer.steps();
  const auto n = static_cast<Eigen::Index>(steps.size());
  AdvantageEstimate est{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  double next_adv = 0.0;
  double next_value = 0.0;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const auto& s = steps[static_cast<std::size_t>(t)];
    if (s.done) {
      next_adv = 0.0;
      next_value = 0.0;
    }
    const double delta = s.reward + gamma * next_value - s.value;
    next_adv = delta + gamma * lambda * next_adv;
    est.advantages(t) = next_adv;
    est.returns(t) = next_adv + s.value;
    next_value = s.value;
  }
  return est;
}

Eigen::VectorXd normalize(const Eigen::VectorXd& v) {
  if (v.size() == 0) return v;
  const double mean = v.mean();
  const Eigen::VectorXd centered = v.array() - mean;
  const double std = std::sqrt(centered.squaredNorm() / static_cast<double>(v.size()));
  return centered / (std + 1e-8);
}

LossResult ppo_loss(const PolicySet& policy, const Critic& critic, const Minibatch& batch, const PpoConfig& config) {
  const auto bsz = batch.observations.cols();
  const auto agents = static_cast<Eigen::Index>(policy.num_agents());
  if (bsz == 0) throw nn::ShapeError("empty minibatch");
  if (batch.actions.rows() != 2 * agents || batch.actions.cols() != bsz || batch.old_log_probs.rows() != agents ||
      batch.old_log_probs.cols() != bsz || batch.advantages.size() != bsz || batch.returns.size() != bsz) {
    throw nn::ShapeError("minibatch fields disagree in shape");
  }
  const double inv_b = 1.0 / static_cast<double>(bsz);
  const auto& log_std = policy.log_std();
  const Eigen::VectorXd sigma = log_std.array().exp();

  LossResult r;
  std::vector<nn::GradientTape> tapes(policy.blocks().size());
  Eigen::MatrixXd mean(2 * agents, bsz);
  for (std::size_t k = 0; k < policy.blocks().size(); ++k) {
    const auto& b = policy.blocks()[k];
    mean.middleRows(b.out_offset, b.net.output_size()) =
        b.net.forward(batch.observations.middleRows(b.in_offset, b.net.input_size()), tapes[k]);
  }
  const Eigen::MatrixXd log_prob = gaussian_log_prob(mean, log_std, batch.actions);

  // Per-sample derivative of the policy loss w.r.t. the joint log-ratio.
  Eigen::VectorXd g(bsz);
  double clipped = 0.0;
  double kl = 0.0;
  double policy_sum = 0.0;
  for (Eigen::Index b = 0; b < bsz; ++b) {
    const double log_ratio = (log_prob.col(b) - batch.old_log_probs.col(b)).sum();
    const double rho = std::exp(log_ratio);
    const double adv = batch.advantages(b);
    const double surr1 = rho * adv;
    const double surr2 = std::clamp(rho, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * adv;
    if (surr1 <= surr2) {
      policy_sum += surr1;
      g(b) = -adv * rho * inv_b;
    } else {
      policy_sum += surr2;
      g(b) = 0.0;
    }
    if (std::abs(rho - 1.0) > config.clip_epsilon) clipped += 1.0;
    kl += (rho - 1.0) - log_ratio;
  }
  r.policy_loss = -policy_sum * inv_b;
  r.clip_fraction = clipped * inv_b;
  r.approx_kl = kl * inv_b;
  r.entropy = (log_std.array() + kHalfLog2PiE).sum();

  const Eigen::MatrixXd z = (batch.actions - mean).array().colwise() / sigma.array();
  Eigen::MatrixXd dmean = (z.array().colwise() / sigma.array()).matrix();
  dmean.array().rowwise() *= g.transpose().array();
  Eigen::VectorXd dlog_std = (z.array().square() - 1.0).matrix() * g;
  dlog_std.array() -= config.entropy_coef;

  for (std::size_t k = 0; k < policy.blocks().size(); ++k) {
    const auto& b = policy.blocks()[k];
    const int out = b.net.output_size();
    const Eigen::VectorXd net_grad = b.net.backward(tapes[k], dmean.middleRows(b.out_offset, out));
    Eigen::VectorXd full(net_grad.size() + out);
    full << net_grad, dlog_std.segment(b.out_offset, out);
    r.actor_gradients.push_back(std::move(full));
  }

  nn::GradientTape critic_tape;
  const Eigen::MatrixXd values = critic.net().forward(batch.observations, critic_tape);
  const Eigen::RowVectorXd err = values.row(0) - batch.returns.transpose();
  r.value_loss = err.squaredNorm() * inv_b;
  r.critic_gradient = critic.net().backward(critic_tape, (config.value_coef * 2.0 * inv_b) * err);

  r.total = r.policy_loss + config.value_coef * r.value_loss - config.entropy_coef * r.entropy;
  return r;
}

UpdateMetrics ppo_update(ActorCritic& agent, ExperienceBuffer& buffer, const PpoConfig& config, nn::Rng& rng) {
  if (buffer.size() < static_cast<std::size_t>(config.steps_per_update)) {
    throw InsufficientDataError("experience buffer holds " + std::to_string(buffer.size()) + " transitions, need " +
                                std::to_string(config.steps_per_update));
  }
  AdvantageEstimate est = compute_gae(buffer, config.gamma, config.gae_lambda);
  if (config.normalize_advantages) est.advantages = normalize(est.advantages);

  const auto& steps = buffer.steps();
  const auto total = static_cast<Eigen::Index>(steps.size());
  const auto agents = static_cast<Eigen::Index>(agent.policy.num_agents());
  Eigen::MatrixXd obs(2 * agents, total);
  Eigen::MatrixXd act(2 * agents, total);
  Eigen::MatrixXd old_lp(agents, total);
  for (Eigen::Index t = 0; t < total; ++t) {
    const auto& s = steps[static_cast<std::size_t>(t)];
    obs.col(t) = s.observation;
    act.col(t) = s.action;
    old_lp.col(t) = Eigen::Map<const Eigen::VectorXd>(s.log_probs.data(), agents);
  }

  UpdateMetrics m;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Minibatch mb;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < total; start += config.batch_size) {
      const Eigen::Index size = std::min<Eigen::Index>(config.batch_size, total - start);
      mb.observations.resize(2 * agents, size);
      mb.actions.resize(2 * agents, size);
      mb.old_log_probs.resize(agents, size);
      mb.advantages.resize(size);
      mb.returns.resize(size);
      for (Eigen::Index j = 0; j < size; ++j) {
        const Eigen::Index t = order[static_cast<std::size_t>(start + j)];
        mb.observations.col(j) = obs.col(t);
        mb.actions.col(j) = act.col(t);
        mb.old_log_probs.col(j) = old_lp.col(t);
        mb.advantages(j) = est.advantages(t);
        mb.returns(j) = est.returns(t);
      }
      const LossResult loss = ppo_loss(agent.policy, agent.critic, mb, config);

      auto& blocks = agent.policy.blocks();
      for (std::size_t k = 0; k < blocks.size(); ++k) {
        auto& net = blocks[k].net;
        const int out = net.output_size();
        const auto n_params = static_cast<Eigen::Index>(net.parameter_count());
        Eigen::VectorXd params(n_params + out);
        params << net.parameters(), agent.policy.log_std().segment(blocks[k].out_offset, out);
        nn::adam_step(params, clip_norm(loss.actor_gradients[k], config.max_grad_norm), agent.actor_optimizers[k]);
        net.mutable_parameters() = params.head(n_params);
        agent.policy.log_std().segment(blocks[k].out_offset, out) = params.tail(out);
      }
      nn::adam_step(agent.critic.net().mutable_parameters(), clip_norm(loss.critic_gradient, config.max_grad_norm),
                    agent.critic_optimizer);

      m.policy_loss += loss.policy_loss;
      m.value_loss += loss.value_loss;
      m.entropy += loss.entropy;
      m.clip_fraction += loss.clip_fraction;
      m.approx_kl += loss.approx_kl;
      ++m.gradient_steps;
    }
  }
  if (m.gradient_steps > 0) {
    const double k = m.gradient_steps;
    m.policy_loss /= k;
    m.value_loss /= k;
    m.entropy /= k;
    m.clip_fraction /= k;
    m.approx_kl /= k;
  }
  buffer.clear();
  return m;
}

std::size_t decentralization_violations(const PolicySet& policy, nn::Rng& rng, int trials) {
  const auto n = static_cast<Eigen::Index>(policy.num_agents());
  if (n < 2) return 0;
  std::normal_distribution<double> normal(0.0, 2.0);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 2);
  std::size_t violations = 0;
  Eigen::VectorXd obs(2 * n);
  for (int trial = 0; trial < trials; ++trial) {
    for (Eigen::Index d = 0; d < obs.size(); ++d) obs(d) = normal(rng);
    const Eigen::VectorXd base = policy.mean(obs);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd perturbed = obs;
      // At least one other agent is always perturbed.
      Eigen::Index forced = pick(rng);
      if (forced >= i) ++forced;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i || (j != forced && !coin(rng))) continue;
        perturbed(2 * j) += normal(rng);
        perturbed(2 * j + 1) += normal(rng);
      }
      const Eigen::VectorXd moved = policy.mean(perturbed);
      if (std::memcmp(moved.data() + 2 * i, base.data() + 2 * i, 2 * sizeof(double)) != 0) ++violations;
    }
  }
  return violations;
}

}  // namespace voltrl
