#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "voltrl/grid.hpp"

namespace voltrl {

/// Non-convergence of the sweep; usually a collapsed or infeasible operating point.
class SolverDivergedError : public std::runtime_error {
 public:
  SolverDivergedError(const std::string& message, double residual, int iterations)
      : std::runtime_error(message), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// Per-bus, per-phase complex injection (p.u., injection-positive). Slot `p`
/// holds phase p; slots for absent phases and the substation are ignored.
using Injection = std::vector<PhaseVector>;

struct VoltageSolution {
  std::vector<PhaseVector> voltage;
  /// Current on each bus's parent line, flowing away from the substation.
  std::vector<PhaseVector> branch_current;
  int iterations = 0;
  /// max |S_specified − V·conj(Y V)| over all non-substation phases.
  double residual = 0.0;
};

struct SolverOptions {
  double tolerance = 1e-8;
  int max_iterations = 100;
};

/// Backward/forward sweep on the radial tree. Substation phases are pinned to
/// the nominal phasors; warm-starts from `initial_guess` when given.
VoltageSolution solve(const NetworkModel& model, std::span<const PhaseVector> injections,
                      const SolverOptions& options = {},
                      std::optional<std::span<const PhaseVector>> initial_guess = std::nullopt);

/// Power-flow mismatch of `voltage` against `injections`, computed from the line admittances.
double power_flow_residual(const NetworkModel& model, std::span<const PhaseVector> injections,
                           std::span<const PhaseVector> voltage);

/// Positive-sequence magnitude for three-phase buses; mean phase magnitude otherwise.
double positive_sequence_magnitude(const NetworkModel& model, const VoltageSolution& solution,
                                   std::size_t bus);
double positive_sequence_magnitude(PhaseSet phases, const PhaseVector& voltage);

struct PowerBalance {
  Complex loss;
  Complex substation_import;
};

PowerBalance total_power_balance(const NetworkModel& model, const VoltageSolution& solution);

/// CSV dump: bus,phase,magnitude_pu,angle_deg.
void write_solution_table(std::ostream& out, const NetworkModel& model, const VoltageSolution& solution);

}  // namespace voltrl
