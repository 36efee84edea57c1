#include <algorithm>
#include <cmath>
#include <numeric>

#include "voltrl/grid.hpp"

namespace voltrl {

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace

NetworkModel generate_synthetic_feeder(int num_buses, int num_controllable, std::uint64_t seed,
                                       const SyntheticFeederOptions& options) {
  if (num_buses < 2) throw std::invalid_argument("synthetic feeder needs at least 2 buses");
  if (num_controllable < 1 || num_controllable > num_buses - 1) {
    throw std::invalid_argument("num_controllable must be in [1, num_buses - 1], got " +
                                std::to_string(num_controllable));
  }
  if (options.branching_window < 1) throw std::invalid_argument("branching_window must be >= 1");

  Rng rng(seed);
  std::uniform_real_distribution<double> length(options.min_length_km, options.max_length_km);
  std::uniform_real_distribution<double> load(options.min_load_kw, options.max_load_kw);
  std::uniform_real_distribution<double> imbalance(0.9, 1.1);
  const double q_ratio = std::tan(std::acos(options.power_factor));

  NetworkData data;
  data.base_kv = options.base_kv;
  data.base_kva = options.base_kva;
  data.mode = NetworkMode::kPerPhase;

  data.buses.push_back(BusData{0, PhaseSet::abc(), {}, {}, std::nullopt});
  for (int k = 1; k < num_buses; ++k) {
    const int lo = std::max(0, k - options.branching_window);
    const int parent = std::uniform_int_distribution<int>(lo, k - 1)(rng);
    const double len = length(rng);

    LineData line;
    line.from = parent;
    line.to = k;
    line.phases = PhaseSet::abc();
    line.r_ohm = Eigen::MatrixXd::Constant(3, 3, round4(options.r_ohm_per_km * options.mutual_r_ratio * len));
    line.x_ohm = Eigen::MatrixXd::Constant(3, 3, round4(options.x_ohm_per_km * options.mutual_x_ratio * len));
    line.r_ohm.diagonal().setConstant(round4(options.r_ohm_per_km * len));
    line.x_ohm.diagonal().setConstant(round4(options.x_ohm_per_km * len));
    data.lines.push_back(std::move(line));

    BusData bus{k, PhaseSet::abc(), {}, {}, std::nullopt};
    const double total = load(rng);
    for (int p = 0; p < 3; ++p) {
      const double kw = round4(total / 3.0 * imbalance(rng));
      bus.load_kw.push_back(kw);
      bus.load_kvar.push_back(round4(kw * q_ratio));
    }
    data.buses.push_back(std::move(bus));
  }

  std::vector<int> candidates(num_buses - 1);
  std::iota(candidates.begin(), candidates.end(), 1);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(num_controllable);
  for (int b : candidates) {
    auto& bus = data.buses[b];
    const double kw = std::accumulate(bus.load_kw.begin(), bus.load_kw.end(), 0.0);
    bus.inverter = InverterSpec{round4(options.inverter_ratio * kw)};
  }
  return NetworkModel(std::move(data));
}

}  // namespace voltrl
