#include "voltrl/powerflow.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

namespace voltrl {

namespace {

const Complex kAlpha = std::polar(1.0, 2.0 * std::numbers::pi / 3.0);

std::vector<PhaseVector> flat_start(const NetworkModel& model) {
  std::vector<PhaseVector> v(model.num_buses());
  for (std::size_t b = 0; b < model.num_buses(); ++b) {
    for (int p : model.bus(b).phases.indices()) v[b][p] = nominal_phasor(p);
  }
  return v;
}

void check_size(const NetworkModel& model, std::size_t n, const char* what) {
  if (n != model.num_buses()) {
    throw std::invalid_argument(std::string(what) + " has " + std::to_string(n) + " entries for " +
                                std::to_string(model.num_buses()) + " buses");
  }
}

}  // namespace

VoltageSolution solve(const NetworkModel& model, std::span<const PhaseVector> injections,
                      const SolverOptions& options, std::optional<std::span<const PhaseVector>> initial_guess) {
  check_size(model, injections.size(), "injection vector");
  const std::size_t n = model.num_buses();
  const auto& lines = model.lines();
  const auto& parent = model.parent_line();
  const auto& order = model.bfs_order();

  VoltageSolution sol;
  sol.voltage = flat_start(model);
  if (initial_guess) {
    check_size(model, initial_guess->size(), "initial guess");
    for (std::size_t b = 1; b < n; ++b) {
      for (int p : model.bus(b).phases.indices()) sol.voltage[b][p] = (*initial_guess)[b][p];
    }
  }

  std::vector<PhaseVector> drawn(n);
  sol.branch_current.assign(n, PhaseVector{});
  double residual = 0.0;
  for (int it = 1; it <= options.max_iterations; ++it) {
    for (std::size_t b = 1; b < n; ++b) {
      drawn[b] = {};
      for (int p : model.bus(b).phases.indices()) drawn[b][p] = -std::conj(injections[b][p] / sol.voltage[b][p]);
    }

    auto& current = sol.branch_current;
    for (std::size_t b = 1; b < n; ++b) current[b] = drawn[b];
    for (auto it_b = order.rbegin(); it_b != order.rend(); ++it_b) {
      const int b = *it_b;
      if (b == 0) continue;
      const auto& line = lines[parent[b]];
      if (line.from == 0) continue;
      for (int p : line.phases.indices()) current[line.from][p] += current[b][p];
    }

    for (int b : order) {
      if (b == 0) continue;
      const auto& line = lines[parent[b]];
      const auto idx = line.phases.indices();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        Complex drop{};
        for (std::size_t c = 0; c < idx.size(); ++c) drop += line.z(r, c) * current[b][idx[c]];
        sol.voltage[b][idx[r]] = sol.voltage[line.from][idx[r]] - drop;
      }
    }

    // The swept currents satisfy KCL with the previous iterate's loads, so the
    // injection implied at the new voltages is V_new · conj(-drawn).
    // Stopping on the summed mismatch keeps the feeder-wide power balance within
    // tolerance as well as every individual phase.
    residual = 0.0;
    double total_mismatch = 0.0;
    bool finite = true;
    for (std::size_t b = 1; b < n; ++b) {
      for (int p : model.bus(b).phases.indices()) {
        const Complex v = sol.voltage[b][p];
        finite = finite && std::isfinite(v.real()) && std::isfinite(v.imag());
        const Complex implied = v * std::conj(-drawn[b][p]);
        const double mismatch = std::abs(injections[b][p] - implied);
        residual = std::max(residual, mismatch);
        total_mismatch += mismatch;
      }
    }
    if (!finite) {
      throw SolverDivergedError("power flow diverged: non-finite voltage at iteration " + std::to_string(it),
                                std::numeric_limits<double>::infinity(), it);
    }
    if (total_mismatch <= options.tolerance) {
      sol.iterations = it;
      sol.residual = residual;
      return sol;
    }
  }
  throw SolverDivergedError("power flow did not converge in " + std::to_string(options.max_iterations) +
                                " iterations (residual " + std::to_string(residual) + ")",
                            residual, options.max_iterations);
}

double power_flow_residual(const NetworkModel& model, std::span<const PhaseVector> injections,
                           std::span<const PhaseVector> voltage) {
  check_size(model, injections.size(), "injection vector");
  check_size(model, voltage.size(), "voltage vector");
  std::vector<PhaseVector> net(model.num_buses());
  for (const auto& line : model.lines()) {
    const auto idx = line.phases.indices();
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::VectorXcd dv(k);
    for (Eigen::Index r = 0; r < k; ++r) dv(r) = voltage[line.from][idx[r]] - voltage[line.to][idx[r]];
    const Eigen::VectorXcd j = line.z.partialPivLu().solve(dv);
    for (Eigen::Index r = 0; r < k; ++r) {
      net[line.from][idx[r]] += j(r);
      net[line.to][idx[r]] -= j(r);
    }
  }
  double worst = 0.0;
  for (std::size_t b = 1; b < model.num_buses(); ++b) {
    for (int p : model.bus(b).phases.indices()) {
      worst = std::max(worst, std::abs(injections[b][p] - voltage[b][p] * std::conj(net[b][p])));
    }
  }
  return worst;
}

double positive_sequence_magnitude(PhaseSet phases, const PhaseVector& v) {
  if (phases == PhaseSet::abc()) return std::abs((v[0] + kAlpha * v[1] + kAlpha * kAlpha * v[2]) / 3.0);
  double sum = 0.0;
  for (int p : phases.indices()) sum += std::abs(v[p]);
  return sum / phases.size();
}

double positive_sequence_magnitude(const NetworkModel& model, const VoltageSolution& solution, std::size_t bus) {
  return positive_sequence_magnitude(model.bus(bus).phases, solution.voltage.at(bus));
}

PowerBalance total_power_balance(const NetworkModel& model, const VoltageSolution& solution) {
  PowerBalance out;
  const auto& parent = model.parent_line();
  for (std::size_t b = 1; b < model.num_buses(); ++b) {
    const auto& line = model.lines()[parent[b]];
    for (int p : line.phases.indices()) {
      const Complex j = solution.branch_current[b][p];
      out.loss += (solution.voltage[line.from][p] - solution.voltage[b][p]) * std::conj(j);
      if (line.from == 0) out.substation_import += solution.voltage[0][p] * std::conj(j);
    }
  }
  return out;
}

void write_solution_table(std::ostream& out, const NetworkModel& model, const VoltageSolution& solution) {
  out << "bus,phase,magnitude_pu,angle_deg\n";
  const auto old_precision = out.precision(10);
  for (std::size_t b = 0; b < model.num_buses(); ++b) {
    for (int p : model.bus(b).phases.indices()) {
      const Complex v = solution.voltage[b][p];
      out << model.bus(b).id << ',' << static_cast<char>('A' + p) << ',' << std::abs(v) << ','
          << std::arg(v) * 180.0 / std::numbers::pi << '\n';
    }
  }
  out.precision(old_precision);
}

}  // namespace voltrl
