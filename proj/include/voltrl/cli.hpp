#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "voltrl/grid.hpp"

namespace voltrl::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 1,
  kRuntimeError = 2,
};

/// Runs one `voltrl` invocation. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// "deep-pv", "no-pv", or a positive count of sampled scenarios.
std::vector<Scenario> resolve_scenarios(const NetworkModel& model, const std::string& text, std::uint64_t seed);

/// Bin counts of ratios over [0, 1] in `bins` equal bins; 1.0 falls in the last bin.
std::vector<int> ratio_histogram(const std::vector<double>& ratios, int bins);

}  // namespace voltrl::cli
