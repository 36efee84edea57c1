#include "voltrl/cli.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "voltrl/env.hpp"
#include "voltrl/ppo.hpp"

namespace voltrl::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kEvalScenarioStream = 101;
constexpr int kHistogramBins = 10;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string grid;
  std::uint64_t seed = 0;
  double mu = 0.1;
  double delta = 0.05;
  int iters = 50;
  int steps_per_update = 2048;
  std::string mode = "decentralized";
  std::string out;
  std::string checkpoint;
  std::string scenarios;
  int workers = 1;
  int buses = 0;
  int inverters = 0;
};

std::ofstream open_output(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

RewardConfig reward_config(const Options& o) {
  RewardConfig r;
  r.delta = o.delta;
  r.default_mu = o.mu;
  return r;
}

ordered_json summary_json(const EvaluationSummary& s) {
  ordered_json j;
  j["episodes"] = s.episodes;
  j["mean_return"] = s.mean_return;
  j["max_deviation"] = s.max_deviation;
  j["final_max_deviation"] = s.final_max_deviation;
  j["mean_power_ratio"] = s.mean_power_ratio;
  j["median_bus_power_ratio"] = s.median_bus_power_ratio;
  return j;
}

void write_json(const fs::path& path, const ordered_json& j) {
  auto f = open_output(path);
  f << j.dump(2) << '\n';
}

void write_traces(std::ostream& out, const std::vector<std::pair<std::string, const std::vector<EpisodeStats>*>>& runs) {
  out << "controller,episode,step,bus,v_posseq,p_c,q_c,p_env,r_v,r_p\n";
  const auto old = out.precision(17);
  for (const auto& [name, episodes] : runs) {
    for (std::size_t e = 0; e < episodes->size(); ++e) {
      for (const auto& r : (*episodes)[e].trace) {
        out << name << ',' << e << ',' << r.step << ',' << r.bus << ',' << r.v_posseq << ',' << r.p_c << ','
            << r.q_c << ',' << r.p_env << ',' << r.r_v << ',' << r.r_p << '\n';
      }
    }
  }
  out.precision(old);
}

NetworkModel load_grid(const Options& o) {
  if (o.grid.empty()) throw UsageError("--grid is required");
  return load_network(o.grid);
}

TrainState load_agent(const Options& o, const NetworkModel& model) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  TrainState state;
  try {
    state = load_checkpoint(o.checkpoint);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (state.agent.policy.num_agents() != model.num_agents()) {
    throw UsageError("checkpoint " + o.checkpoint + " controls " + std::to_string(state.agent.policy.num_agents()) +
                     " agents but grid " + o.grid + " has " + std::to_string(model.num_agents()) + " inverters");
  }
  return state;
}

std::string rerun_command(const Options& o) {
  std::ostringstream s;
  s.precision(17);
  s << "voltrl train --grid " << o.grid << " --seed " << o.seed << " --mu " << o.mu << " --delta " << o.delta
    << " --iters " << o.iters << " --steps-per-update " << o.steps_per_update << " --mode " << o.mode << " --out "
    << o.out << " --workers " << o.workers;
  return s.str();
}

int cmd_train(const Options& o, std::ostream& out) {
  const NetworkModel model = load_grid(o);
  if (o.steps_per_update < 512 || o.steps_per_update > 2048) {
    throw UsageError("--steps-per-update must lie in [512, 2048]");
  }
  if (o.iters < 0) throw UsageError("--iters must be non-negative");
  if (o.workers < 1) throw UsageError("--workers must be positive");
  if (o.out.empty()) throw UsageError("--out is required");

  TrainConfig cfg;
  cfg.mode = parse_policy_mode(o.mode);
  cfg.reward = reward_config(o);
  cfg.ppo.steps_per_update = o.steps_per_update;
  cfg.iterations = o.iters;
  cfg.workers = o.workers;
  cfg.episode.validate();
  cfg.reward.validate(model.num_agents());
  cfg.ppo.validate(cfg.episode.horizon);

  const fs::path dir(o.out);
  ensure_dir(dir);
  ordered_json config;
  config["command"] = "train";
  config["grid"] = o.grid;
  config["seed"] = o.seed;
  config["mode"] = o.mode;
  config["mu"] = o.mu;
  config["delta"] = o.delta;
  config["horizon"] = cfg.episode.horizon;
  config["dp_max_ratio"] = cfg.episode.dp_max_ratio;
  config["dq_max_ratio"] = cfg.episode.dq_max_ratio;
  config["setpoint_init"] = "mppt";
  config["iterations"] = o.iters;
  config["workers"] = o.workers;
  config["load_scale"] = {cfg.loads.min_scale, cfg.loads.max_scale};
  config["ppo"] = {{"steps_per_update", cfg.ppo.steps_per_update},
                   {"batch_size", cfg.ppo.batch_size},
                   {"epochs", cfg.ppo.epochs},
                   {"clip_epsilon", cfg.ppo.clip_epsilon},
                   {"gamma", cfg.ppo.gamma},
                   {"gae_lambda", cfg.ppo.gae_lambda},
                   {"entropy_coef", cfg.ppo.entropy_coef},
                   {"value_coef", cfg.ppo.value_coef},
                   {"max_grad_norm", cfg.ppo.max_grad_norm},
                   {"normalize_advantages", cfg.ppo.normalize_advantages},
                   {"log_std_init", cfg.ppo.log_std_init},
                   {"learning_rate", cfg.ppo.adam.learning_rate}};
  config["rerun"] = rerun_command(o);
  write_json(dir / "config.json", config);

  auto metrics = open_output(dir / "metrics.csv");
  write_metrics_header(metrics);
  out << "training " << to_string(cfg.mode) << " policy on " << model.num_agents() << " inverters for " << o.iters
      << " iterations\n";
  const TrainResult result = train(model, cfg, o.seed, [&](const IterationMetrics& m) {
    write_metrics_row(metrics, m);
    metrics.flush();
    out << "iter " << m.iteration << "  steps " << m.env_steps << "  mean episode reward " << m.mean_episode_reward
        << "  max |1-V| " << m.max_voltage_deviation << '\n';
  });
  save_checkpoint(result.state, dir / "checkpoint.json");
  out << "actor parameters " << result.state.agent.policy.actor_parameter_count() << ", wrote " << dir.string()
      << '\n';
  return kSuccess;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const NetworkModel model = load_grid(o);
  const TrainState state = load_agent(o, model);
  if (o.out.empty()) throw UsageError("--out is required");
  const auto scenarios = resolve_scenarios(model, o.scenarios.empty() ? "10" : o.scenarios, o.seed);
  const RewardConfig reward = reward_config(o);
  reward.validate(model.num_agents());

  const auto episodes = evaluate(model, state.agent, scenarios, {}, reward, true);
  const EvaluationSummary s = summarize(episodes);
  const fs::path dir(o.out);
  ensure_dir(dir);
  {
    auto f = open_output(dir / "traces.csv");
    write_traces(f, {{"rl", &episodes}});
  }
  ordered_json j = summary_json(s);
  j["delta"] = o.delta;
  j["within_band"] = s.max_deviation <= o.delta;
  write_json(dir / "summary.json", j);
  out << "episodes " << s.episodes << "  mean return " << s.mean_return << "  max |1-V| " << s.max_deviation
      << "  mean P/p_env " << s.mean_power_ratio << '\n';
  return kSuccess;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const NetworkModel model = load_grid(o);
  const TrainState state = load_agent(o, model);
  if (o.out.empty()) throw UsageError("--out is required");
  const auto scenarios = resolve_scenarios(model, o.scenarios.empty() ? "deep-pv" : o.scenarios, o.seed);
  const RewardConfig reward = reward_config(o);
  reward.validate(model.num_agents());

  const auto rl = evaluate(model, state.agent, scenarios, {}, reward, true);
  std::vector<EpisodeStats> mppt;
  for (const auto& sc : scenarios) mppt.push_back(mppt_baseline(model, sc, {}, reward, true));

  const fs::path dir(o.out);
  ensure_dir(dir);
  {
    auto f = open_output(dir / "traces.csv");
    write_traces(f, {{"rl", &rl}, {"mppt", &mppt}});
  }
  {
    auto f = open_output(dir / "profiles.csv");
    f << "controller,episode,bus,v_posseq,p_c,q_c,p_env,power_ratio\n";
    f.precision(17);
    const std::pair<const char*, const std::vector<EpisodeStats>*> runs_by_name[] = {{"rl", &rl}, {"mppt", &mppt}};
    for (const auto& [name, runs] : runs_by_name) {
      for (std::size_t e = 0; e < runs->size(); ++e) {
        const auto& ep = (*runs)[e];
        const int last = ep.trace.empty() ? 0 : ep.trace.back().step;
        std::size_t agent = 0;
        for (const auto& r : ep.trace) {
          if (r.step != last) continue;
          f << name << ',' << e << ',' << r.bus << ',' << r.v_posseq << ',' << r.p_c << ',' << r.q_c << ','
            << r.p_env << ',' << ep.final_power_ratio[agent++] << '\n';
        }
      }
    }
  }
  std::vector<double> ratios;
  for (const auto& ep : rl) ratios.insert(ratios.end(), ep.final_power_ratio.begin(), ep.final_power_ratio.end());
  const auto counts = ratio_histogram(ratios, kHistogramBins);
  {
    auto f = open_output(dir / "histogram.csv");
    f << "bin_low,bin_high,count\n";
    for (int b = 0; b < kHistogramBins; ++b) {
      f << static_cast<double>(b) / kHistogramBins << ',' << static_cast<double>(b + 1) / kHistogramBins << ','
        << counts[b] << '\n';
    }
  }
  const EvaluationSummary srl = summarize(rl);
  const EvaluationSummary smppt = summarize(mppt);
  ordered_json j;
  j["delta"] = o.delta;
  j["rl"] = summary_json(srl);
  j["mppt"] = summary_json(smppt);
  write_json(dir / "summary.json", j);
  out << "rl:   max |1-V| " << srl.max_deviation << "  steady " << srl.final_max_deviation << "  median P/p_env "
      << srl.median_bus_power_ratio << '\n'
      << "mppt: max |1-V| " << smppt.max_deviation << "  steady " << smppt.final_max_deviation << '\n';
  return kSuccess;
}

int cmd_gen_feeder(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("--out is required");
  NetworkModel model = [&] {
    try {
      return generate_synthetic_feeder(o.buses, o.inverters, o.seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }();
  const fs::path path(o.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  save_network(model, path);
  out << "wrote " << path.string() << " (" << model.num_buses() << " buses, " << model.num_agents()
      << " inverters)\n";
  return kSuccess;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--grid", o.grid, "Grid file (JSON)");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--mu", o.mu, "Real-power reward weight")->check(CLI::NonNegativeNumber);
  cmd->add_option("--delta", o.delta, "Voltage band half-width (p.u.)")->check(CLI::PositiveNumber);
  cmd->add_option("--out", o.out, "Output location");
}

}  // namespace

std::vector<Scenario> resolve_scenarios(const NetworkModel& model, const std::string& text, std::uint64_t seed) {
  if (text == "deep-pv") return {deep_pv_scenario(model)};
  if (text == "no-pv") return {no_pv_scenario(model)};
  int count = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), count);
  if (ec != std::errc() || end != text.data() + text.size() || count <= 0) {
    throw std::invalid_argument("--scenarios must be a positive count, deep-pv or no-pv (got \"" + text + "\")");
  }
  std::vector<Scenario> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(sample_scenario(model, derive_seed(seed, kEvalScenarioStream, static_cast<std::uint64_t>(k))));
  }
  return out;
}

std::vector<int> ratio_histogram(const std::vector<double>& ratios, int bins) {
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (double r : ratios) {
    const int b = std::clamp(static_cast<int>(std::floor(r * bins)), 0, bins - 1);
    ++counts[b];
  }
  return counts;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app("Decentralized PPO voltage regulation with PV inverters", "voltrl");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  Options o;
  auto* train = app.add_subcommand("train", "Train a policy and write checkpoint, metrics and config");
  add_common(train, o);
  train->add_option("--iters", o.iters, "PPO iterations");
  train->add_option("--steps-per-update", o.steps_per_update, "Environment steps per PPO update (512-2048)");
  train->add_option("--mode", o.mode, "Actor structure")->check(CLI::IsMember({"decentralized", "centralized"}));
  train->add_option("--workers", o.workers, "Parallel rollout workers")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Deterministic rollouts of a checkpoint");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval->add_option("--scenarios", o.scenarios, "Sampled scenario count, deep-pv or no-pv (default 10)");

  auto* compare = app.add_subcommand("compare", "RL policy against the MPPT baseline on identical scenarios");
  add_common(compare, o);
  compare->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  compare->add_option("--scenarios", o.scenarios, "Sampled scenario count, deep-pv or no-pv (default deep-pv)");

  auto* gen = app.add_subcommand("gen-feeder", "Write a random radial three-phase feeder");
  gen->add_option("buses", o.buses, "Number of buses including the substation")->required();
  gen->add_option("inverters", o.inverters, "Number of inverter buses")->required();
  gen->add_option("--seed", o.seed, "Generator seed");
  gen->add_option("--out", o.out, "Output grid file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (*train) return cmd_train(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*compare) return cmd_compare(o, out);
    return cmd_gen_feeder(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const GridError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace voltrl::cli
