#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "voltrl/grid.hpp"

namespace voltrl {

namespace {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

constexpr int kSchemaVersion = 1;

[[noreturn]] void field_error(const std::string& path, const std::string& message) {
  throw GridParseError(path + ": " + message);
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
  const auto it = obj.find(key);
  if (it == obj.end()) field_error(path, "missing required field \"" + key + "\"");
  return *it;
}

double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) field_error(path, "expected a number");
  return j.get<double>();
}

int as_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) field_error(path, "expected an integer");
  return j.get<int>();
}

std::vector<double> as_vector(const json& j, const std::string& path) {
  if (!j.is_array()) field_error(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_number(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

Eigen::MatrixXd as_matrix(const json& j, const std::string& path) {
  if (!j.is_array()) field_error(path, "expected a square matrix (array of rows)");
  const auto n = static_cast<Eigen::Index>(j.size());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row_path = path + "[" + std::to_string(r) + "]";
    const auto row = as_vector(j[r], row_path);
    if (static_cast<Eigen::Index>(row.size()) != n) field_error(row_path, "row length does not match matrix size");
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = row[c];
  }
  return m;
}

PhaseSet as_phases(const json& j, const std::string& path) {
  if (!j.is_string()) field_error(path, "expected a phase string such as \"ABC\"");
  try {
    const auto p = PhaseSet::parse(j.get<std::string>());
    if (p.empty()) field_error(path, "empty phase set");
    return p;
  } catch (const GridParseError& e) {
    field_error(path, e.what());
  }
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

ordered_json matrix_json(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

NetworkData parse_network_data(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw GridParseError("line " + std::to_string(line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1)) +
                         ": " + e.what());
  }
  if (!doc.is_object()) field_error("$", "expected a JSON object");

  const int schema = as_int(require(doc, "schema", "$"), "schema");
  if (schema != kSchemaVersion) field_error("schema", "unsupported version " + std::to_string(schema));

  NetworkData data;
  data.base_kv = as_number(require(doc, "base_kv", "$"), "base_kv");
  data.base_kva = as_number(require(doc, "base_kva", "$"), "base_kva");
  if (const auto it = doc.find("mode"); it != doc.end()) {
    const auto mode = it->is_string() ? it->get<std::string>() : std::string();
    if (mode == "per_phase") {
      data.mode = NetworkMode::kPerPhase;
    } else if (mode == "single_phase_equivalent") {
      data.mode = NetworkMode::kSinglePhaseEquivalent;
    } else {
      field_error("mode", "expected \"per_phase\" or \"single_phase_equivalent\"");
    }
  }

  const auto& buses = require(doc, "buses", "$");
  if (!buses.is_array()) field_error("buses", "expected an array");
  for (std::size_t i = 0; i < buses.size(); ++i) {
    const auto path = "buses[" + std::to_string(i) + "]";
    const auto& b = buses[i];
    if (!b.is_object()) field_error(path, "expected an object");
    BusData bus;
    bus.id = as_int(require(b, "id", path), path + ".id");
    bus.phases = as_phases(require(b, "phases", path), path + ".phases");
    if (b.contains("load_kw")) bus.load_kw = as_vector(b["load_kw"], path + ".load_kw");
    if (b.contains("load_kvar")) bus.load_kvar = as_vector(b["load_kvar"], path + ".load_kvar");
    if (b.contains("inverter") && !b["inverter"].is_null()) {
      const auto& inv = b["inverter"];
      if (!inv.is_object()) field_error(path + ".inverter", "expected an object");
      bus.inverter = InverterSpec{as_number(require(inv, "s_kva", path + ".inverter"), path + ".inverter.s_kva")};
    }
    data.buses.push_back(std::move(bus));
  }

  const auto& lines = require(doc, "lines", "$");
  if (!lines.is_array()) field_error("lines", "expected an array");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto path = "lines[" + std::to_string(i) + "]";
    const auto& l = lines[i];
    if (!l.is_object()) field_error(path, "expected an object");
    LineData line;
    line.from = as_int(require(l, "from", path), path + ".from");
    line.to = as_int(require(l, "to", path), path + ".to");
    line.phases = as_phases(require(l, "phases", path), path + ".phases");
    line.r_ohm = as_matrix(require(l, "r_ohm", path), path + ".r_ohm");
    line.x_ohm = as_matrix(require(l, "x_ohm", path), path + ".x_ohm");
    data.lines.push_back(std::move(line));
  }
  return data;
}

NetworkModel parse_network(std::string_view text) { return NetworkModel(parse_network_data(text)); }

NetworkModel load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw GridError("cannot open grid file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_network(buffer.str());
  } catch (const GridParseError& e) {
    throw GridParseError(path.string() + ": " + e.what());
  } catch (const GridValidationError& e) {
    throw GridValidationError(path.string() + ": " + e.what());
  }
}

std::string serialize_network(const NetworkModel& model) {
  const auto& data = model.data();
  ordered_json doc;
  doc["schema"] = kSchemaVersion;
  doc["base_kv"] = data.base_kv;
  doc["base_kva"] = data.base_kva;
  doc["mode"] = data.mode == NetworkMode::kPerPhase ? "per_phase" : "single_phase_equivalent";

  ordered_json buses = ordered_json::array();
  for (const auto& b : data.buses) {
    ordered_json bus;
    bus["id"] = b.id;
    bus["phases"] = b.phases.str();
    if (!b.load_kw.empty()) bus["load_kw"] = b.load_kw;
    if (!b.load_kvar.empty()) bus["load_kvar"] = b.load_kvar;
    if (b.inverter) bus["inverter"] = ordered_json{{"s_kva", b.inverter->s_kva}};
    buses.push_back(std::move(bus));
  }
  doc["buses"] = std::move(buses);

  ordered_json lines = ordered_json::array();
  for (const auto& l : data.lines) {
    ordered_json line;
    line["from"] = l.from;
    line["to"] = l.to;
    line["phases"] = l.phases.str();
    line["r_ohm"] = matrix_json(l.r_ohm);
    line["x_ohm"] = matrix_json(l.x_ohm);
    lines.push_back(std::move(line));
  }
  doc["lines"] = std::move(lines);
  return doc.dump(2) + "\n";
}

void save_network(const NetworkModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw GridError("cannot write grid file " + path.string());
  out << serialize_network(model);
}

}  // namespace voltrl
