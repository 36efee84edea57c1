#include "voltrl/grid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <queue>
#include <sstream>

namespace voltrl {

PhaseSet PhaseSet::parse(std::string_view text) {
  if (text.empty()) throw GridParseError("empty phase set");
  std::uint8_t bits = 0;
  for (char c : text) {
    int phase = -1;
    switch (c) {
      case 'A': case 'a': phase = 0; break;
      case 'B': case 'b': phase = 1; break;
      case 'C': case 'c': phase = 2; break;
      default:
        throw GridParseError("invalid phase letter '" + std::string(1, c) + "' in \"" +
                             std::string(text) + "\"");
    }
    if (bits & (1u << phase)) {
      throw GridParseError("duplicate phase in \"" + std::string(text) + "\"");
    }
    bits |= static_cast<std::uint8_t>(1u << phase);
  }
  return PhaseSet(bits);
}

std::string PhaseSet::str() const {
  std::string out;
  for (int p : indices()) out.push_back(static_cast<char>('A' + p));
  return out;
}

int PhaseSet::size() const { return std::popcount(bits_); }

PhaseList PhaseSet::indices() const {
  PhaseList out;
  for (int p = 0; p < 3; ++p) {
    if (contains(p)) out.push_back(p);
  }
  return out;
}

Complex nominal_phasor(int phase) {
  if (phase == 0) return {1.0, 0.0};
  return std::polar(1.0, -2.0 * std::numbers::pi / 3.0 * phase);
}

namespace {

std::string bus_label(int id) { return "bus " + std::to_string(id); }

std::string line_label(const LineData& l) {
  return "line " + std::to_string(l.from) + "->" + std::to_string(l.to);
}

bool finite(const Eigen::MatrixXd& m) { return m.allFinite(); }

}  // namespace

NetworkModel::NetworkModel(NetworkData data) : data_(std::move(data)) {
  if (!(data_.base_kv > 0.0) || !std::isfinite(data_.base_kv)) {
    throw GridValidationError("base_kv must be positive");
  }
  if (!(data_.base_kva > 0.0) || !std::isfinite(data_.base_kva)) {
    throw GridValidationError("base_kva must be positive");
  }
  if (data_.buses.empty()) throw GridValidationError("network has no buses");

  std::sort(data_.buses.begin(), data_.buses.end(),
            [](const BusData& a, const BusData& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < data_.buses.size(); ++i) {
    if (data_.buses[i].id < 0) throw GridValidationError("negative bus id " + std::to_string(data_.buses[i].id));
    if (i > 0 && data_.buses[i].id == data_.buses[i - 1].id) {
      throw GridValidationError("duplicate bus id " + std::to_string(data_.buses[i].id));
    }
  }
  if (data_.buses.front().id != 0) throw GridValidationError("substation bus 0 is missing");

  const bool sequence = data_.mode == NetworkMode::kSinglePhaseEquivalent;
  const double s_base = power_base_kva();
  const double z_base = impedance_base_ohm();

  buses_.reserve(data_.buses.size());
  for (const auto& bd : data_.buses) {
    const auto label = bus_label(bd.id);
    if (bd.phases.empty()) throw GridValidationError(label + ": empty phase set");
    const auto idx = bd.phases.indices();
    const auto check_len = [&](const std::vector<double>& v, const char* field) {
      if (!v.empty() && v.size() != idx.size()) {
        throw GridValidationError(label + ": " + field + " has " + std::to_string(v.size()) +
                                  " entries for phases " + bd.phases.str());
      }
    };
    check_len(bd.load_kw, "load_kw");
    check_len(bd.load_kvar, "load_kvar");

    Bus bus;
    bus.id = bd.id;
    bus.phases = sequence ? PhaseSet(0x1u) : bd.phases;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double p = bd.load_kw.empty() ? 0.0 : bd.load_kw[k];
      const double q = bd.load_kvar.empty() ? 0.0 : bd.load_kvar[k];
      if (!std::isfinite(p) || !std::isfinite(q)) throw GridValidationError(label + ": non-finite load");
      if (p < 0.0) throw GridValidationError(label + ": negative real load on phase " + std::string(1, 'A' + idx[k]));
      const Complex s{p / s_base, q / s_base};
      if (sequence) {
        bus.load[0] += s;
      } else {
        bus.load[idx[k]] = s;
      }
    }
    if (bd.inverter) {
      if (!(bd.inverter->s_kva > 0.0) || !std::isfinite(bd.inverter->s_kva)) {
        throw GridValidationError(label + ": inverter s_kva must be positive");
      }
      bus.capacity = bd.inverter->s_kva / s_base;
    }
    if (bd.id == 0) {
      if (bus.total_load() != Complex{}) throw GridValidationError("substation bus 0 must not carry load");
      if (bd.inverter) throw GridValidationError("substation bus 0 must not have an inverter");
    }
    buses_.push_back(bus);
  }

  const std::size_t n = buses_.size();
  if (data_.lines.size() != n - 1) {
    throw GridValidationError("network is not radial: " + std::to_string(data_.lines.size()) +
                              " lines for " + std::to_string(n) + " buses (expected " +
                              std::to_string(n - 1) + ")");
  }

  std::vector<std::vector<int>> adjacency(n);
  lines_.reserve(data_.lines.size());
  for (std::size_t li = 0; li < data_.lines.size(); ++li) {
    const auto& ld = data_.lines[li];
    const auto label = line_label(ld);
    const auto from = index_of(ld.from);
    const auto to = index_of(ld.to);
    if (from == to) throw GridValidationError(label + ": self loop");
    if (ld.phases.empty()) throw GridValidationError(label + ": empty phase set");
    if (!ld.phases.subset_of(data_.buses[from].phases) || !ld.phases.subset_of(data_.buses[to].phases)) {
      throw GridValidationError(label + ": phase mismatch, line phases " + ld.phases.str() +
                                " not carried by both endpoints");
    }
    const auto k = ld.phases.size();
    if (ld.r_ohm.rows() != k || ld.r_ohm.cols() != k || ld.x_ohm.rows() != k || ld.x_ohm.cols() != k) {
      throw GridValidationError(label + ": impedance matrices must be " + std::to_string(k) + "x" +
                                std::to_string(k));
    }
    if (!finite(ld.r_ohm) || !finite(ld.x_ohm)) throw GridValidationError(label + ": non-finite impedance");
    if (ld.r_ohm != ld.r_ohm.transpose() || ld.x_ohm != ld.x_ohm.transpose()) {
      throw GridValidationError(label + ": impedance matrix is not symmetric");
    }
    for (int d = 0; d < k; ++d) {
      if (ld.r_ohm(d, d) == 0.0 && ld.x_ohm(d, d) == 0.0) {
        throw GridValidationError(label + ": zero self impedance");
      }
    }

    Line line;
    line.from = static_cast<int>(from);
    line.to = static_cast<int>(to);
    Eigen::MatrixXcd z(k, k);
    for (int r = 0; r < k; ++r) {
      for (int c = 0; c < k; ++c) z(r, c) = Complex{ld.r_ohm(r, c), ld.x_ohm(r, c)} / z_base;
    }
    if (sequence) {
      line.phases = PhaseSet(0x1u);
      Complex z1 = z(0, 0);
      if (k > 1) {
        const Complex self = z.diagonal().mean();
        const Complex mutual = (z.sum() - z.diagonal().sum()) / static_cast<double>(k * (k - 1));
        z1 = self - mutual;
      }
      line.z = Eigen::MatrixXcd::Constant(1, 1, z1);
    } else {
      line.phases = ld.phases;
      line.z = std::move(z);
    }
    lines_.push_back(std::move(line));
    adjacency[from].push_back(static_cast<int>(li));
    adjacency[to].push_back(static_cast<int>(li));
  }

  // Orient lines away from the substation and record a traversal order.
  parent_line_.assign(n, -1);
  std::vector<bool> seen(n, false);
  std::queue<int> frontier;
  frontier.push(0);
  seen[0] = true;
  while (!frontier.empty()) {
    const int b = frontier.front();
    frontier.pop();
    bfs_order_.push_back(b);
    for (int li : adjacency[b]) {
      if (li == parent_line_[b]) continue;
      auto& line = lines_[li];
      const int other = line.from == b ? line.to : line.from;
      if (seen[other]) {
        throw GridValidationError("network is not radial: cycle detected through " +
                                  line_label(data_.lines[li]));
      }
      if (line.from != b) std::swap(line.from, line.to);
      seen[other] = true;
      parent_line_[other] = li;
      frontier.push(other);
    }
  }
  for (std::size_t b = 0; b < n; ++b) {
    if (!seen[b]) {
      throw GridValidationError("network is not connected: " + bus_label(buses_[b].id) +
                                " unreachable from the substation");
    }
  }
  for (std::size_t b = 1; b < n; ++b) {
    const auto& line = lines_[parent_line_[b]];
    if (line.phases != buses_[b].phases) {
      throw GridValidationError("phase mismatch: " + bus_label(buses_[b].id) + " has phases " +
                                buses_[b].phases.str() + " but is fed by phases " + line.phases.str());
    }
  }

  for (std::size_t b = 0; b < n; ++b) {
    if (buses_[b].has_inverter()) controllable_.push_back(static_cast<int>(b));
  }
  if (controllable_.empty()) throw GridValidationError("network has no controllable inverter");
}

double NetworkModel::power_base_kva() const {
  return data_.mode == NetworkMode::kSinglePhaseEquivalent ? data_.base_kva : data_.base_kva / 3.0;
}

double NetworkModel::impedance_base_ohm() const {
  return data_.base_kv * data_.base_kv * 1000.0 / data_.base_kva;
}

std::size_t NetworkModel::index_of(int bus_id) const {
  const auto it = std::lower_bound(data_.buses.begin(), data_.buses.end(), bus_id,
                                   [](const BusData& b, int id) { return b.id < id; });
  if (it == data_.buses.end() || it->id != bus_id) {
    throw GridValidationError("unknown bus id " + std::to_string(bus_id));
  }
  return static_cast<std::size_t>(it - data_.buses.begin());
}

namespace {

std::vector<PhaseVector> base_loads(const NetworkModel& model) {
  std::vector<PhaseVector> loads;
  loads.reserve(model.num_buses());
  for (const auto& b : model.buses()) loads.push_back(b.load);
  return loads;
}

double pv_ceiling(const NetworkModel& model, const PhaseVector& load, int bus) {
  const double x = (load[0] + load[1] + load[2]).real();
  return std::max(0.0, std::min(2.0 * x, 0.9 * model.bus(bus).capacity));
}

}  // namespace

Scenario sample_scenario(const NetworkModel& model, std::uint64_t seed, const LoadDistribution& distribution) {
  Rng rng(seed);
  std::uniform_real_distribution<double> scale_dist(distribution.min_scale, distribution.max_scale);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scenario s;
  s.seed = seed;
  s.load = base_loads(model);
  const double common = scale_dist(rng);
  for (std::size_t b = 1; b < model.num_buses(); ++b) {
    const double scale = distribution.common_scale ? common : scale_dist(rng);
    for (auto& v : s.load[b]) v *= scale;
  }
  s.p_env.reserve(model.num_agents());
  for (int bus : model.controllable()) {
    s.p_env.push_back(pv_ceiling(model, s.load[bus], bus) * unit(rng));
  }
  return s;
}

Scenario deep_pv_scenario(const NetworkModel& model) {
  Scenario s;
  s.load = base_loads(model);
  for (int bus : model.controllable()) s.p_env.push_back(pv_ceiling(model, s.load[bus], bus));
  return s;
}

Scenario no_pv_scenario(const NetworkModel& model) {
  Scenario s;
  s.load = base_loads(model);
  s.p_env.assign(model.num_agents(), 0.0);
  return s;
}

}  // namespace voltrl
