#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace voltrl {

using Complex = std::complex<double>;
using PhaseVector = std::array<Complex, 3>;
using Rng = std::mt19937_64;

class GridError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed grid file. `what()` carries the line number or JSON field path.
class GridParseError : public GridError {
 public:
  using GridError::GridError;
};

/// Well-formed input that violates a model invariant (cycle, phase mismatch, ...).
class GridValidationError : public GridError {
 public:
  using GridError::GridError;
};

/// Up to three phase indices, ascending; iterable without allocation.
class PhaseList {
 public:
  void push_back(int p) { items_[size_++] = p; }
  const int* begin() const { return items_.data(); }
  const int* end() const { return items_.data() + size_; }
  std::size_t size() const { return size_; }
  int operator[](std::size_t i) const { return items_[i]; }

 private:
  std::array<int, 3> items_{};
  std::size_t size_ = 0;
};

/// Nonempty subset of {A, B, C}, stored as a bit mask.
class PhaseSet {
 public:
  constexpr PhaseSet() = default;
  constexpr explicit PhaseSet(std::uint8_t bits) : bits_(bits & 0x7u) {}

  static PhaseSet parse(std::string_view text);
  static constexpr PhaseSet abc() { return PhaseSet(0x7u); }

  std::string str() const;
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool contains(int phase) const { return (bits_ >> phase) & 1u; }
  constexpr bool subset_of(PhaseSet other) const { return (bits_ & ~other.bits_) == 0; }
  int size() const;
  /// Phase indices (0 = A) in ascending order.
  PhaseList indices() const;

  friend constexpr bool operator==(PhaseSet, PhaseSet) = default;

 private:
  std::uint8_t bits_ = 0;
};

enum class NetworkMode {
  kPerPhase,
  /// Balanced feeder collapsed to one positive-sequence conductor per bus.
  kSinglePhaseEquivalent,
};

struct InverterSpec {
  double s_kva = 0.0;
};

/// Bus record as authored (physical units, loads listed per phase in the
/// bus's phase order).
struct BusData {
  int id = 0;
  PhaseSet phases;
  std::vector<double> load_kw;
  std::vector<double> load_kvar;
  std::optional<InverterSpec> inverter;
};

struct LineData {
  int from = 0;
  int to = 0;
  PhaseSet phases;
  Eigen::MatrixXd r_ohm;
  Eigen::MatrixXd x_ohm;
};

struct NetworkData {
  double base_kv = 0.0;   // line-to-line
  double base_kva = 0.0;  // three-phase
  NetworkMode mode = NetworkMode::kPerPhase;
  std::vector<BusData> buses;
  std::vector<LineData> lines;
};

struct Bus {
  int id = 0;
  PhaseSet phases;
  /// Consumption-positive complex load per phase slot (p.u.); absent phases are zero.
  PhaseVector load{};
  /// Apparent power capacity in p.u.; zero when the bus has no inverter.
  double capacity = 0.0;
  bool has_inverter() const { return capacity > 0.0; }
  Complex total_load() const { return load[0] + load[1] + load[2]; }
};

/// Line oriented away from the substation. `z` is indexed by the line's phases in A, B, C order.
struct Line {
  int from = 0;  // bus index
  int to = 0;    // bus index
  PhaseSet phases;
  Eigen::MatrixXcd z;
};

/// Validated radial feeder in per-unit form.
///
/// Bus index 0 is the substation (file id 0). Buses are stored sorted by id; all
/// cross references (lines, controllable set) use bus indices.
class NetworkModel {
 public:
  /// Validates `data` and converts to p.u. Throws GridValidationError.
  explicit NetworkModel(NetworkData data);

  const NetworkData& data() const { return data_; }
  NetworkMode mode() const { return data_.mode; }
  double base_kv() const { return data_.base_kv; }
  double base_kva() const { return data_.base_kva; }
  /// Power base of one modelled conductor: base_kva / 3 per phase, or base_kva
  /// in single-phase-equivalent mode.
  double power_base_kva() const;
  double impedance_base_ohm() const;

  std::size_t num_buses() const { return buses_.size(); }
  const std::vector<Bus>& buses() const { return buses_; }
  const Bus& bus(std::size_t index) const { return buses_.at(index); }
  const std::vector<Line>& lines() const { return lines_; }
  std::size_t index_of(int bus_id) const;

  /// Bus indices with an inverter, ordered by bus id.
  const std::vector<int>& controllable() const { return controllable_; }
  std::size_t num_agents() const { return controllable_.size(); }

  /// Parent line of each bus (-1 for the substation).
  const std::vector<int>& parent_line() const { return parent_line_; }
  /// Bus indices in breadth-first order from the substation.
  const std::vector<int>& bfs_order() const { return bfs_order_; }

 private:
  NetworkData data_;
  std::vector<Bus> buses_;
  std::vector<Line> lines_;
  std::vector<int> controllable_;
  std::vector<int> parent_line_;
  std::vector<int> bfs_order_;
};

/// Nominal phasor of phase `p` at the substation: 1∠(−120°·p).
Complex nominal_phasor(int phase);

// Grid file I/O (JSON, schema 1).
NetworkModel load_network(const std::filesystem::path& path);
NetworkModel parse_network(std::string_view text);
NetworkData parse_network_data(std::string_view text);
std::string serialize_network(const NetworkModel& model);
void save_network(const NetworkModel& model, const std::filesystem::path& path);

struct SyntheticFeederOptions {
  double base_kv = 4.16;
  double base_kva = 1000.0;
  /// Each new bus attaches to one of the previous `branching_window` buses.
  int branching_window = 3;
  double min_length_km = 0.2;
  double max_length_km = 0.6;
  double r_ohm_per_km = 0.35;
  double x_ohm_per_km = 0.40;
  double mutual_r_ratio = 0.3;
  double mutual_x_ratio = 0.4;
  double min_load_kw = 20.0;
  double max_load_kw = 60.0;
  double power_factor = 0.95;
  /// Inverter rating as a multiple of the bus base real load.
  double inverter_ratio = 3.5;
};

/// Random balanced three-phase radial feeder; deterministic in `seed`.
NetworkModel generate_synthetic_feeder(int num_buses, int num_controllable, std::uint64_t seed,
                                       const SyntheticFeederOptions& options = {});

struct LoadDistribution {
  double min_scale = 0.5;
  double max_scale = 1.5;
  /// One scale factor for the whole feeder rather than one per bus.
  bool common_scale = false;
};

/// Per-episode exogenous inputs. Indexing: `load` by bus index, `p_env` by agent.
struct Scenario {
  std::vector<PhaseVector> load;
  std::vector<double> p_env;
  std::uint64_t seed = 0;
};

/// Scales base loads per the distribution, then draws each agent's available
/// solar power uniformly in [0, min(2x, 0.9 S)] where x is the bus's sampled net real load.
Scenario sample_scenario(const NetworkModel& model, std::uint64_t seed,
                         const LoadDistribution& distribution = {});

/// Base loads with every inverter at the top of the sampling range, min(2x, 0.9 S).
Scenario deep_pv_scenario(const NetworkModel& model);
/// Base loads, no solar.
Scenario no_pv_scenario(const NetworkModel& model);

}  // namespace voltrl
