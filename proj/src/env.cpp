#include "voltrl/env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace voltrl {

void RewardConfig::validate(std::size_t num_agents) const {
  if (!(delta > 0.0)) throw std::invalid_argument("reward delta must be positive");
  if (!(default_mu >= 0.0)) throw std::invalid_argument("mu must be non-negative");
  if (!mu.empty() && mu.size() != num_agents) {
    throw std::invalid_argument("mu has " + std::to_string(mu.size()) + " weights for " +
                                std::to_string(num_agents) + " agents");
  }
  for (double m : mu) {
    if (!(m >= 0.0)) throw std::invalid_argument("mu must be non-negative");
  }
}

void EpisodeConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("episode horizon must be at least 1");
  if (!(dp_max_ratio > 0.0) || !(dq_max_ratio > 0.0)) {
    throw std::invalid_argument("setpoint increment bounds must be positive");
  }
}

Setpoint project_setpoint(double p_request, double q_request, const InverterLimits& limits) {
  const double s = limits.capacity;
  const double p_max = std::max(0.0, std::min(limits.p_env, 0.9 * s));
  const double p = std::clamp(std::isnan(p_request) ? 0.0 : p_request, 0.0, p_max);
  double q_max = std::sqrt(std::max(0.0, s * s - p * p));
  // sqrt may round up by an ulp; shrink until the circle holds exactly.
  while (q_max > 0.0 && p * p + q_max * q_max > s * s) q_max = std::nextafter(q_max, 0.0);
  const double q = std::clamp(std::isnan(q_request) ? 0.0 : q_request, -q_max, q_max);
  return {p, q};
}

bool setpoint_feasible(const Setpoint& sp, const InverterLimits& limits) {
  const double s = limits.capacity;
  return sp.p >= 0.0 && sp.p <= std::min(limits.p_env, 0.9 * s) && sp.p * sp.p + sp.q * sp.q <= s * s;
}

Setpoint setpoint_increment(const AgentAction& action, Complex load_delta, double capacity,
                            const EpisodeConfig& config) {
  return {config.dp_max_ratio * capacity * action.a_p + load_delta.real(),
          config.dq_max_ratio * capacity * action.a_q + load_delta.imag()};
}

std::vector<Setpoint> apply_actions(std::span<const Setpoint> current, std::span<const AgentAction> actions,
                                    std::span<const Complex> load_delta, std::span<const InverterLimits> limits,
                                    const EpisodeConfig& config) {
  const auto n = current.size();
  if (actions.size() != n || load_delta.size() != n || limits.size() != n) {
    throw std::invalid_argument("apply_actions: per-agent inputs disagree in length");
  }
  std::vector<Setpoint> next(n);
  for (std::size_t i = 0; i < n; ++i) {
    const AgentAction a{std::clamp(actions[i].a_p, -1.0, 1.0), std::clamp(actions[i].a_q, -1.0, 1.0)};
    const auto inc = setpoint_increment(a, load_delta[i], limits[i].capacity, config);
    next[i] = project_setpoint(current[i].p + inc.p, current[i].q + inc.q, limits[i]);
  }
  return next;
}

std::vector<double> agent_voltages(const NetworkModel& model, const VoltageSolution& solution) {
  std::vector<double> v;
  v.reserve(model.num_agents());
  for (int bus : model.controllable()) v.push_back(positive_sequence_magnitude(model, solution, bus));
  return v;
}

AgentObservation observe_agent(const Setpoint& injection, double capacity, double voltage) {
  return {injection.p / (0.9 * capacity) - 1.0, (1.0 - voltage) / 0.05};
}

std::vector<AgentObservation> observe(const GridState& state, const NetworkModel& model) {
  const auto v = agent_voltages(model, state.solution);
  std::vector<AgentObservation> obs;
  obs.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    obs.push_back(observe_agent(state.injection.at(i), model.bus(model.controllable()[i]).capacity, v[i]));
  }
  return obs;
}

RewardBreakdown compute_reward(std::span<const double> voltages, std::span<const Setpoint> injection,
                               const NetworkModel& model, const RewardConfig& config) {
  const auto n = model.num_agents();
  if (voltages.size() != n || injection.size() != n) {
    throw std::invalid_argument("compute_reward: expected one voltage and setpoint per agent");
  }
  RewardBreakdown out;
  out.r_v.resize(n);
  out.r_p.resize(n);
  out.per_bus.resize(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double capacity = model.bus(model.controllable()[i]).capacity;
    out.r_v[i] = std::min(config.delta - std::abs(1.0 - voltages[i]), 0.0) / 0.05;
    out.r_p[i] = injection[i].p / (0.9 * capacity);
    out.per_bus[i] = out.r_v[i] + config.mu_at(i) * out.r_p[i];
    sum += out.per_bus[i];
  }
  out.system = sum / static_cast<double>(n);
  return out;
}

Injection build_injection(const NetworkModel& model, std::span<const PhaseVector> load,
                          std::span<const Setpoint> injection) {
  Injection inj(model.num_buses());
  for (std::size_t b = 1; b < model.num_buses(); ++b) {
    for (int p : model.bus(b).phases.indices()) inj[b][p] = -load[b][p];
  }
  const auto& agents = model.controllable();
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto& bus = model.bus(agents[i]);
    const Complex share = Complex{injection[i].p, injection[i].q} / static_cast<double>(bus.phases.size());
    for (int p : bus.phases.indices()) inj[agents[i]][p] += share;
  }
  return inj;
}

double max_voltage_deviation(const NetworkModel& model, const VoltageSolution& solution) {
  double worst = 0.0;
  for (std::size_t b = 1; b < model.num_buses(); ++b) {
    worst = std::max(worst, std::abs(1.0 - positive_sequence_magnitude(model, solution, b)));
  }
  return worst;
}

GridEnv::GridEnv(const NetworkModel& model, EpisodeConfig episode, RewardConfig reward, SolverOptions solver)
    : model_(&model), episode_(episode), reward_(std::move(reward)), solver_(solver) {
  episode_.validate();
  reward_.validate(model.num_agents());
}

const std::vector<AgentObservation>& GridEnv::reset(const Scenario& scenario) {
  const auto& model = *model_;
  const auto n = model.num_agents();
  if (scenario.load.size() != model.num_buses() || scenario.p_env.size() != n) {
    throw std::invalid_argument("scenario does not match the network");
  }
  scenario_ = scenario;
  limits_.resize(n);
  agent_load_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int bus = model.controllable()[i];
    const double p_env = scenario.p_env[i];
    if (!(p_env >= 0.0) || !std::isfinite(p_env)) throw std::invalid_argument("p_env must be finite and >= 0");
    limits_[i] = {model.bus(bus).capacity, p_env};
    const auto& l = scenario.load[bus];
    agent_load_[i] = l[0] + l[1] + l[2];
  }

  std::vector<Setpoint> setpoints(n);
  const bool persist = episode_.init == SetpointInit::kPersist && started_;
  for (std::size_t i = 0; i < n; ++i) {
    switch (episode_.init) {
      case SetpointInit::kMppt:
        setpoints[i] = project_setpoint(limits_[i].p_env, 0.0, limits_[i]);
        break;
      case SetpointInit::kZero:
        setpoints[i] = {};
        break;
      case SetpointInit::kPersist:
        setpoints[i] = persist ? project_setpoint(state_.injection[i].p, state_.injection[i].q, limits_[i])
                               : Setpoint{};
        break;
    }
  }
  if (!persist) previous_load_ = agent_load_;

  state_.injection = std::move(setpoints);
  state_.solution = {};
  t_ = 0;
  started_ = true;
  solve_state();
  observations_ = observe(state_, model);
  return observations_;
}

void GridEnv::solve_state() {
  const auto inj = build_injection(*model_, scenario_.load, state_.injection);
  try {
    if (state_.solution.voltage.empty()) {
      state_.solution = solve(*model_, inj, solver_);
    } else {
      const std::vector<PhaseVector> guess = state_.solution.voltage;
      state_.solution = solve(*model_, inj, solver_, std::span<const PhaseVector>(guess));
    }
  } catch (const SolverDivergedError& e) {
    throw EpisodeAbortedError(std::string("episode aborted at step ") + std::to_string(t_) + ": " + e.what());
  }
  voltages_ = agent_voltages(*model_, state_.solution);
}

StepResult GridEnv::step(std::span<const AgentAction> actions) {
  if (actions.size() != num_agents()) {
    throw std::invalid_argument("expected " + std::to_string(num_agents()) + " actions, got " +
                                std::to_string(actions.size()));
  }
  std::vector<Complex> delta(num_agents());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = agent_load_[i] - previous_load_[i];
  previous_load_ = agent_load_;
  return advance(apply_actions(state_.injection, actions, delta, limits_, episode_));
}

StepResult GridEnv::step_setpoints(std::span<const Setpoint> setpoints) {
  if (setpoints.size() != num_agents()) throw std::invalid_argument("expected one setpoint per agent");
  std::vector<Setpoint> next(setpoints.size());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = project_setpoint(setpoints[i].p, setpoints[i].q, limits_[i]);
  previous_load_ = agent_load_;
  return advance(std::move(next));
}

StepResult GridEnv::advance(std::vector<Setpoint> next) {
  if (!started_) throw std::logic_error("GridEnv::step before reset");
  if (done()) throw std::logic_error("GridEnv::step after the episode ended");
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (!setpoint_feasible(next[i], limits_[i])) ++violations_;
  }
  state_.injection = std::move(next);
  ++t_;
  solve_state();
  observations_ = observe(state_, *model_);

  StepResult r;
  r.observations = observations_;
  r.reward = compute_reward(voltages_, state_.injection, *model_, reward_);
  r.done = done();
  r.max_deviation = max_voltage_deviation(*model_, state_.solution);
  double p_sum = 0.0;
  double env_sum = 0.0;
  for (std::size_t i = 0; i < limits_.size(); ++i) {
    p_sum += state_.injection[i].p;
    env_sum += limits_[i].p_env;
  }
  r.power_ratio = env_sum > 0.0 ? p_sum / env_sum : 1.0;
  return r;
}

Eigen::VectorXd joint_observation(std::span<const AgentObservation> observations) {
  Eigen::VectorXd x(2 * static_cast<Eigen::Index>(observations.size()));
  for (std::size_t i = 0; i < observations.size(); ++i) {
    x(2 * i) = observations[i].s_p;
    x(2 * i + 1) = observations[i].s_v;
  }
  return x;
}

namespace {

void append_trace(const GridEnv& env, int step, const RewardBreakdown& reward, std::vector<TraceRow>& trace) {
  const auto& model = env.model();
  const double base = model.power_base_kva();
  for (std::size_t i = 0; i < env.num_agents(); ++i) {
    const auto& sp = env.state().injection[i];
    trace.push_back({step, model.bus(model.controllable()[i]).id, env.voltages()[i], sp.p * base, sp.q * base,
                     env.limits()[i].p_env * base, reward.r_v[i], reward.r_p[i]});
  }
}

void finish_stats(const GridEnv& env, EpisodeStats& stats) {
  const auto n = env.num_agents();
  stats.mean_reward = stats.steps > 0 ? stats.episode_return / stats.steps : 0.0;
  stats.final_max_deviation = max_voltage_deviation(env.model(), env.state().solution);
  stats.final_voltage = env.voltages();
  stats.final_setpoint = env.state().injection;
  stats.final_power_ratio.resize(n);
  double p_sum = 0.0;
  double env_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p_env = env.limits()[i].p_env;
    const double p = stats.final_setpoint[i].p;
    stats.final_power_ratio[i] = p_env > 0.0 ? p / p_env : 1.0;
    p_sum += p;
    env_sum += p_env;
  }
  stats.final_total_ratio = env_sum > 0.0 ? p_sum / env_sum : 1.0;
}

}  // namespace

EpisodeStats run_episode(GridEnv& env, const Controller& controller, const Scenario& scenario, bool in_training,
                         TransitionRecorder* recorder, Rng& rng, bool keep_trace) {
  EpisodeStats stats;
  std::vector<AgentObservation> obs = env.reset(scenario);
  if (keep_trace) {
    append_trace(env, 0, compute_reward(env.voltages(), env.state().injection, env.model(), env.reward_config()),
                 stats.trace);
  }
  while (!env.done()) {
    Decision decision = controller.decide(obs, in_training, rng);
    StepResult result = env.step(decision.actions);
    if (in_training && recorder != nullptr) {
      recorder->record(Transition{joint_observation(obs), std::move(decision.raw_action),
                                  std::move(decision.log_probs), result.reward.system, decision.value, result.done});
    }
    ++stats.steps;
    stats.episode_return += result.reward.system;
    stats.max_deviation = std::max(stats.max_deviation, result.max_deviation);
    if (keep_trace) append_trace(env, env.t(), result.reward, stats.trace);
    obs = std::move(result.observations);
  }
  finish_stats(env, stats);
  return stats;
}

EpisodeStats mppt_baseline(const NetworkModel& model, const Scenario& scenario, const EpisodeConfig& episode,
                           const RewardConfig& reward, bool keep_trace) {
  EpisodeConfig cfg = episode;
  cfg.init = SetpointInit::kMppt;
  GridEnv env(model, cfg, reward);
  EpisodeStats stats;
  env.reset(scenario);
  if (keep_trace) {
    append_trace(env, 0, compute_reward(env.voltages(), env.state().injection, model, reward), stats.trace);
  }
  std::vector<Setpoint> mppt(env.num_agents());
  for (std::size_t i = 0; i < mppt.size(); ++i) mppt[i] = {env.limits()[i].p_env, 0.0};
  while (!env.done()) {
    const StepResult result = env.step_setpoints(mppt);
    ++stats.steps;
    stats.episode_return += result.reward.system;
    stats.max_deviation = std::max(stats.max_deviation, result.max_deviation);
    if (keep_trace) append_trace(env, env.t(), result.reward, stats.trace);
  }
  finish_stats(env, stats);
  return stats;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows) {
  out << "step,bus,v_posseq,p_c,q_c,p_env,r_v,r_p\n";
  const auto old_precision = out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.bus << ',' << r.v_posseq << ',' << r.p_c << ',' << r.q_c << ',' << r.p_env << ','
        << r.r_v << ',' << r.r_p << '\n';
  }
  out.precision(old_precision);
}

}  // namespace voltrl
