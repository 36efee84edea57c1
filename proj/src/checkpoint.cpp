#include <algorithm>
#include <fstream>

#include "voltrl/ppo.hpp"

namespace voltrl {

namespace {

constexpr const char* kFormat = "voltrl-checkpoint";
constexpr int kVersion = 1;

}  // namespace

nlohmann::json policy_to_json(const PolicySet& policy) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : policy.blocks()) {
    blocks.push_back({{"in_offset", b.in_offset}, {"out_offset", b.out_offset}, {"net", nn::to_json(b.net)}});
  }
  return {{"mode", to_string(policy.mode())},
          {"num_agents", policy.num_agents()},
          {"log_std", nn::vector_to_json(policy.log_std())},
          {"blocks", blocks}};
}

PolicySet policy_from_json(const nlohmann::json& j) {
  PolicySet p;
  p.mode_ = parse_policy_mode(j.at("mode").get<std::string>());
  p.num_agents_ = j.at("num_agents").get<std::size_t>();
  p.log_std_ = nn::vector_from_json(j.at("log_std"));
  const auto dim = 2 * static_cast<int>(p.num_agents_);
  if (p.log_std_.size() != dim) throw nn::ShapeError("log_std length does not match the agent count");
  std::vector<bool> covered(static_cast<std::size_t>(dim), false);
  for (const auto& jb : j.at("blocks")) {
    ActorBlock b{nn::mlp_from_json(jb.at("net")), jb.at("in_offset").get<int>(), jb.at("out_offset").get<int>()};
    if (b.in_offset < 0 || b.out_offset < 0 || b.in_offset + b.net.input_size() > dim ||
        b.out_offset + b.net.output_size() > dim) {
      throw nn::ShapeError("actor block exceeds the joint observation or action");
    }
    for (int d = b.out_offset; d < b.out_offset + b.net.output_size(); ++d) {
      if (covered[d]) throw nn::ShapeError("actor blocks overlap in the joint action");
      covered[d] = true;
    }
    p.blocks_.push_back(std::move(b));
  }
  if (std::find(covered.begin(), covered.end(), false) != covered.end()) {
    throw nn::ShapeError("actor blocks do not cover the joint action");
  }
  return p;
}

nlohmann::json checkpoint_to_json(const TrainState& state) {
  nlohmann::json optimizers = nlohmann::json::array();
  for (const auto& o : state.agent.actor_optimizers) optimizers.push_back(nn::to_json(o));
  return {{"format", kFormat},
          {"version", kVersion},
          {"seed", state.seed},
          {"episodes_started", state.episodes_started},
          {"iterations_done", state.iterations_done},
          {"env_steps", state.env_steps},
          {"actor_parameters", state.agent.policy.actor_parameter_count()},
          {"critic_parameters", state.agent.critic.net().parameter_count()},
          {"policy", policy_to_json(state.agent.policy)},
          {"critic", nn::to_json(state.agent.critic.net())},
          {"actor_optimizers", optimizers},
          {"critic_optimizer", nn::to_json(state.agent.critic_optimizer)}};
}

TrainState checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kFormat) throw std::runtime_error("not a voltrl checkpoint");
  if (j.at("version").get<int>() != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + j.at("version").dump());
  }
  TrainState s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.episodes_started = j.at("episodes_started").get<long>();
  s.iterations_done = j.at("iterations_done").get<int>();
  s.env_steps = j.at("env_steps").get<long>();
  s.agent.policy = policy_from_json(j.at("policy"));
  s.agent.critic = Critic(nn::mlp_from_json(j.at("critic")));
  if (s.agent.critic.net().input_size() != 2 * static_cast<int>(s.agent.policy.num_agents()) ||
      s.agent.critic.net().output_size() != 1) {
    throw nn::ShapeError("critic shape does not match the policy");
  }
  for (const auto& o : j.at("actor_optimizers")) s.agent.actor_optimizers.push_back(nn::adam_from_json(o));
  s.agent.critic_optimizer = nn::adam_from_json(j.at("critic_optimizer"));
  const auto& blocks = s.agent.policy.blocks();
  if (s.agent.actor_optimizers.size() != blocks.size()) throw nn::ShapeError("one optimizer per actor block expected");
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto expected = static_cast<Eigen::Index>(blocks[k].net.parameter_count()) + blocks[k].net.output_size();
    if (s.agent.actor_optimizers[k].m.size() != expected) throw nn::ShapeError("actor optimizer size mismatch");
  }
  if (s.agent.critic_optimizer.m.size() != static_cast<Eigen::Index>(s.agent.critic.net().parameter_count())) {
    throw nn::ShapeError("critic optimizer size mismatch");
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(state).dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  try {
    return checkpoint_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed checkpoint: " + e.what());
  } catch (const nn::ShapeError& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace voltrl
