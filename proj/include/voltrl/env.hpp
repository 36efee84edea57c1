#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "voltrl/grid.hpp"
#include "voltrl/powerflow.hpp"

namespace voltrl {

/// Scaled local measurements: s_p = P/(0.9 S) − 1, s_v = (1 − V)/0.05.
struct AgentObservation {
  double s_p = 0.0;
  double s_v = 0.0;
};

/// Scaled setpoint increments, each in [−1, 1].
struct AgentAction {
  double a_p = 0.0;
  double a_q = 0.0;
};

struct Setpoint {
  double p = 0.0;
  double q = 0.0;
};

struct InverterLimits {
  double capacity = 0.0;
  double p_env = 0.0;
};

struct RewardConfig {
  double delta = 0.05;
  double default_mu = 0.1;
  /// Per-agent weights; empty means `default_mu` everywhere.
  std::vector<double> mu;

  double mu_at(std::size_t agent) const { return mu.empty() ? default_mu : mu.at(agent); }
  void validate(std::size_t num_agents) const;
};

enum class SetpointInit {
  /// Every episode starts at P = min(p_env, 0.9 S), Q = 0.
  kMppt,
  kZero,
  /// Setpoints carry over between episodes; load jumps enter via the integral controller.
  kPersist,
};

struct EpisodeConfig {
  int horizon = 100;
  double step_seconds = 0.01;  // informational
  double dp_max_ratio = 0.09;  // Δ_max^P / S
  double dq_max_ratio = 0.2;   // Δ_max^Q / S
  SetpointInit init = SetpointInit::kMppt;

  void validate() const;
};

/// Quasi-steady-state snapshot: solved voltages plus the injections that produced them.
struct GridState {
  VoltageSolution solution;
  std::vector<Setpoint> injection;  // per agent
};

struct RewardBreakdown {
  std::vector<double> r_v;  // per agent, ≤ 0
  std::vector<double> r_p;  // per agent, in [0, 1]
  std::vector<double> per_bus;
  double system = 0.0;      // mean over agents of r_v + mu·r_p
};

struct StepResult {
  std::vector<AgentObservation> observations;
  RewardBreakdown reward;
  bool done = false;
  double max_deviation = 0.0;  // max |1 − V| over all non-substation buses
  double power_ratio = 1.0;    // Σ P^c / Σ p_env (1 when no solar is available)
};

class EpisodeAbortedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Closed-form projection onto the feasible set: P is clamped to
/// [0, min(p_env, 0.9 S)] first, then Q to ±sqrt(S² − P²).
Setpoint project_setpoint(double p_request, double q_request, const InverterLimits& limits);

/// True when the setpoint satisfies the capability circle and the real-power window exactly.
bool setpoint_feasible(const Setpoint& s, const InverterLimits& limits);

/// Integral-controller increment before projection:
/// (Δ_max^P·a_p + ΔP^l, Δ_max^Q·a_q + ΔQ^l).
Setpoint setpoint_increment(const AgentAction& action, Complex load_delta, double capacity,
                            const EpisodeConfig& config);

/// Adds the increments to `current` and projects each result.
std::vector<Setpoint> apply_actions(std::span<const Setpoint> current, std::span<const AgentAction> actions,
                                    std::span<const Complex> load_delta, std::span<const InverterLimits> limits,
                                    const EpisodeConfig& config);

/// Positive-sequence magnitude at each controllable bus, ordered by agent.
std::vector<double> agent_voltages(const NetworkModel& model, const VoltageSolution& solution);

AgentObservation observe_agent(const Setpoint& injection, double capacity, double voltage);
std::vector<AgentObservation> observe(const GridState& state, const NetworkModel& model);

RewardBreakdown compute_reward(std::span<const double> voltages, std::span<const Setpoint> injection,
                               const NetworkModel& model, const RewardConfig& config);

/// Bus injections (p.u.) from loads and per-agent inverter output split evenly over the bus phases.
Injection build_injection(const NetworkModel& model, std::span<const PhaseVector> load,
                          std::span<const Setpoint> injection);

double max_voltage_deviation(const NetworkModel& model, const VoltageSolution& solution);

/// Single-threaded episodic environment over an immutable feeder. The model
/// must outlive the environment.
class GridEnv {
 public:
  GridEnv(const NetworkModel& model, EpisodeConfig episode = {}, RewardConfig reward = {},
          SolverOptions solver = {});

  const NetworkModel& model() const { return *model_; }
  const EpisodeConfig& episode_config() const { return episode_; }
  const RewardConfig& reward_config() const { return reward_; }
  std::size_t num_agents() const { return model_->num_agents(); }

  const std::vector<AgentObservation>& reset(const Scenario& scenario);
  StepResult step(std::span<const AgentAction> actions);
  /// Applies explicit setpoints (projected), bypassing the integral controller.
  StepResult step_setpoints(std::span<const Setpoint> setpoints);

  int t() const { return t_; }
  bool done() const { return t_ >= episode_.horizon; }
  const Scenario& scenario() const { return scenario_; }
  const GridState& state() const { return state_; }
  const std::vector<InverterLimits>& limits() const { return limits_; }
  const std::vector<AgentObservation>& observations() const { return observations_; }
  const std::vector<double>& voltages() const { return voltages_; }
  /// Setpoint or capacity violations seen since construction; stays zero by construction.
  std::size_t constraint_violations() const { return violations_; }

 private:
  StepResult advance(std::vector<Setpoint> next);
  void solve_state();

  const NetworkModel* model_;
  EpisodeConfig episode_;
  RewardConfig reward_;
  SolverOptions solver_;

  Scenario scenario_;
  std::vector<InverterLimits> limits_;
  std::vector<Complex> agent_load_;
  std::vector<Complex> previous_load_;
  GridState state_;
  std::vector<double> voltages_;
  std::vector<AgentObservation> observations_;
  int t_ = 0;
  bool started_ = false;
  std::size_t violations_ = 0;
};

// --- Episode loop -----------------------------------------------------------

/// One joint decision. `raw_action` is the pre-clip sample (2n), `actions` the
/// clipped per-agent actions actually applied.
struct Decision {
  std::vector<AgentAction> actions;
  Eigen::VectorXd raw_action;
  std::vector<double> log_probs;
  double value = 0.0;
};

class Controller {
 public:
  virtual ~Controller() = default;
  virtual Decision decide(std::span<const AgentObservation> observations, bool stochastic, Rng& rng) const = 0;
};

struct Transition {
  Eigen::VectorXd observation;  // 2n, (s_p, s_v) per agent
  Eigen::VectorXd action;       // 2n, pre-clip
  std::vector<double> log_probs;
  double reward = 0.0;
  double value = 0.0;
  bool done = false;
};

class TransitionRecorder {
 public:
  virtual ~TransitionRecorder() = default;
  virtual void record(Transition transition) = 0;
};

struct TraceRow {
  int step = 0;
  int bus = 0;  // bus id
  double v_posseq = 0.0;
  double p_c = 0.0;  // kW
  double q_c = 0.0;  // kvar
  double p_env = 0.0;  // kW
  double r_v = 0.0;
  double r_p = 0.0;
};

struct EpisodeStats {
  int steps = 0;
  double episode_return = 0.0;  // Σ R_t
  double mean_reward = 0.0;
  double max_deviation = 0.0;        // over every post-action state
  double final_max_deviation = 0.0;  // steady state (last step)
  std::vector<double> final_voltage;      // per agent
  std::vector<Setpoint> final_setpoint;   // per agent, p.u.
  std::vector<double> final_power_ratio;  // per agent, P^c / p_env (1 when p_env = 0)
  double final_total_ratio = 1.0;         // Σ P^c / Σ p_env
  std::vector<TraceRow> trace;
};

Eigen::VectorXd joint_observation(std::span<const AgentObservation> observations);

/// One episode: stochastic actions and recording iff `in_training`.
EpisodeStats run_episode(GridEnv& env, const Controller& controller, const Scenario& scenario, bool in_training,
                         TransitionRecorder* recorder, Rng& rng, bool keep_trace = false);

/// Maximum-power-point tracking with unity power factor at every inverter.
EpisodeStats mppt_baseline(const NetworkModel& model, const Scenario& scenario, const EpisodeConfig& episode = {},
                           const RewardConfig& reward = {}, bool keep_trace = false);

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows);

}  // namespace voltrl
