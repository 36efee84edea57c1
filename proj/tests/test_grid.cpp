#include <gtest/gtest.h>

#include <queue>
#include <set>

#include "voltrl/grid.hpp"

using namespace voltrl;

namespace {

const std::string kData = VOLTRL_DATA_DIR;
const std::string kTestData = VOLTRL_TEST_DATA_DIR;

std::string two_bus_text(const std::string& extra_bus_field = "", const std::string& line_phases = "A") {
  return R"({"schema": 1, "base_kv": 1.0, "base_kva": 1000.0, "mode": "single_phase_equivalent",
    "buses": [{"id": 0, "phases": "A", "load_kw": [0], "load_kvar": [0]},
              {"id": 1, "phases": "A", "load_kw": [1000], "load_kvar": [500], "inverter": {"s_kva": 500})" +
         extra_bus_field + R"(}],
    "lines": [{"from": 0, "to": 1, "phases": ")" +
         line_phases + R"(", "r_ohm": [[0.01]], "x_ohm": [[0.02]]}]})";
}

bool connected(const NetworkModel& m) {
  std::vector<std::vector<int>> adj(m.num_buses());
  for (const auto& l : m.lines()) {
    adj[l.from].push_back(l.to);
    adj[l.to].push_back(l.from);
  }
  std::vector<bool> seen(m.num_buses(), false);
  std::queue<int> q;
  q.push(0);
  seen[0] = true;
  std::size_t count = 1;
  while (!q.empty()) {
    const int b = q.front();
    q.pop();
    for (int n : adj[b]) {
      if (!seen[n]) {
        seen[n] = true;
        ++count;
        q.push(n);
      }
    }
  }
  return count == m.num_buses();
}

}  // namespace

TEST(PhaseSet, ParsesAndPrints) {
  EXPECT_EQ(PhaseSet::parse("ABC"), PhaseSet::abc());
  EXPECT_EQ(PhaseSet::parse("CA").str(), "AC");
  EXPECT_EQ(PhaseSet::parse("B").size(), 1);
  EXPECT_TRUE(PhaseSet::parse("AB").subset_of(PhaseSet::abc()));
  EXPECT_FALSE(PhaseSet::parse("AB").subset_of(PhaseSet::parse("BC")));
  EXPECT_THROW(PhaseSet::parse(""), GridParseError);
  EXPECT_THROW(PhaseSet::parse("AD"), GridParseError);
}

TEST(LoadNetwork, TwoBusFixture) {
  const auto m = load_network(kData + "/two_bus.json");
  EXPECT_EQ(m.num_buses(), 2u);
  EXPECT_EQ(m.lines().size(), 1u);
  EXPECT_EQ(m.num_agents(), 1u);
  // Z base is 1 ohm and the power base 1000 kVA, so the file maps onto round p.u. values.
  EXPECT_NEAR(m.lines()[0].z(0, 0).real(), 0.01, 1e-15);
  EXPECT_NEAR(m.lines()[0].z(0, 0).imag(), 0.02, 1e-15);
  EXPECT_NEAR(m.bus(1).load[0].real(), 1.0, 1e-15);
  EXPECT_NEAR(m.bus(1).load[0].imag(), 0.5, 1e-15);
  EXPECT_NEAR(m.bus(1).capacity, 0.5, 1e-15);
}

TEST(LoadNetwork, ThirteenBusFixtureCountedByInspection) {
  const auto m = load_network(kData + "/feeder13.json");
  EXPECT_EQ(m.num_buses(), 13u);
  EXPECT_EQ(m.lines().size(), 12u);
  EXPECT_EQ(m.num_agents(), 6u);
  EXPECT_EQ(m.controllable(), (std::vector<int>{2, 4, 5, 7, 8, 12}));
  EXPECT_EQ(m.bus(4).phases.str(), "C");
  EXPECT_EQ(m.bus(3).phases.str(), "BC");
  // Per-phase base is a third of the three-phase base.
  EXPECT_NEAR(m.bus(2).load[0].real(), 120.0 / (1000.0 / 3.0), 1e-15);
}

TEST(LoadNetwork, CycleIsRejectedAsNonRadial) {
  try {
    load_network(kTestData + "/cycle3.json");
    FAIL() << "expected a validation error";
  } catch (const GridValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("not radial"), std::string::npos) << e.what();
  }
}

TEST(LoadNetwork, MissingFileNamesThePath) {
  try {
    load_network("/nonexistent/feeder.json");
    FAIL();
  } catch (const GridError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/feeder.json"), std::string::npos);
  }
}

TEST(ParseNetwork, SyntaxErrorReportsLine) {
  try {
    parse_network("{\n  \"schema\": 1,\n  \"base_kv\": ,\n}");
    FAIL();
  } catch (const GridParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(ParseNetwork, FieldErrorsNameTheField) {
  std::string text = two_bus_text();
  text.replace(text.find("\"load_kw\": [1000]"), 17, "\"load_kw\": \"x\"");
  try {
    parse_network(text);
    FAIL();
  } catch (const GridParseError& e) {
    EXPECT_NE(std::string(e.what()).find("buses[1].load_kw"), std::string::npos) << e.what();
  }
}

TEST(ParseNetwork, ValidationNamesTheInvariant) {
  EXPECT_NO_THROW(parse_network(two_bus_text()));
  try {
    parse_network(two_bus_text("", "B"));
    FAIL();
  } catch (const GridValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("phase mismatch"), std::string::npos) << e.what();
  }
  std::string negative = two_bus_text();
  negative.replace(negative.find("[1000]"), 6, "[-5]");
  EXPECT_THROW(parse_network(negative), GridValidationError);
  std::string unsupported = two_bus_text();
  unsupported.replace(unsupported.find("\"schema\": 1"), 11, "\"schema\": 2");
  EXPECT_THROW(parse_network(unsupported), GridParseError);
}

TEST(ParseNetwork, SubstationMayNotCarryLoad) {
  std::string text = two_bus_text();
  text.replace(text.find("\"load_kw\": [0]"), 14, "\"load_kw\": [5]");
  EXPECT_THROW(parse_network(text), GridValidationError);
}

TEST(ParseNetwork, AsymmetricImpedanceRejected) {
  const std::string text = R"({"schema": 1, "base_kv": 4.16, "base_kva": 1000,
    "buses": [{"id": 0, "phases": "AB"}, {"id": 1, "phases": "AB", "load_kw": [1, 1], "inverter": {"s_kva": 5}}],
    "lines": [{"from": 0, "to": 1, "phases": "AB", "r_ohm": [[0.3, 0.1], [0.2, 0.3]], "x_ohm": [[0.4, 0.1], [0.1, 0.4]]}]})";
  EXPECT_THROW(parse_network(text), GridValidationError);
}

TEST(ParseNetwork, RequiresAnInverter) {
  std::string text = two_bus_text();
  const std::string inverter = ", \"inverter\": {\"s_kva\": 500}";
  text.replace(text.find(inverter), inverter.size(), "");
  EXPECT_THROW(parse_network(text), GridValidationError);
}

TEST(RoundTrip, SerializedFixturesParseToIdenticalModels) {
  for (const char* name : {"two_bus.json", "feeder13.json", "deep_pv8.json", "feeder16.json"}) {
    const auto m = load_network(kData + "/" + name);
    const std::string text = serialize_network(m);
    const auto again = parse_network(text);
    EXPECT_EQ(serialize_network(again), text) << name;
    ASSERT_EQ(again.num_buses(), m.num_buses());
    for (std::size_t b = 0; b < m.num_buses(); ++b) {
      EXPECT_EQ(again.bus(b).load, m.bus(b).load) << name;
      EXPECT_EQ(again.bus(b).capacity, m.bus(b).capacity) << name;
      EXPECT_EQ(again.bus(b).phases, m.bus(b).phases) << name;
    }
    for (std::size_t l = 0; l < m.lines().size(); ++l) {
      EXPECT_EQ(again.lines()[l].z, m.lines()[l].z) << name;
      EXPECT_EQ(again.lines()[l].from, m.lines()[l].from) << name;
    }
  }
}

TEST(Synthetic, SmallestFeeder) {
  const auto m = generate_synthetic_feeder(2, 1, 123);
  EXPECT_EQ(m.num_buses(), 2u);
  EXPECT_EQ(m.num_agents(), 1u);
}

TEST(Synthetic, DeterministicAndRadial) {
  const auto a = generate_synthetic_feeder(9, 8, 7);
  const auto b = generate_synthetic_feeder(9, 8, 7);
  EXPECT_EQ(serialize_network(a), serialize_network(b));
  EXPECT_EQ(a.lines().size(), 8u);
  EXPECT_TRUE(connected(a));
  EXPECT_EQ(a.num_agents(), 8u);
  EXPECT_NE(serialize_network(a), serialize_network(generate_synthetic_feeder(9, 8, 8)));
}

TEST(Synthetic, InvalidSizesThrow) {
  EXPECT_THROW(generate_synthetic_feeder(1, 1, 0), std::invalid_argument);
  EXPECT_THROW(generate_synthetic_feeder(5, 5, 0), std::invalid_argument);
  EXPECT_THROW(generate_synthetic_feeder(5, 0, 0), std::invalid_argument);
}

TEST(Synthetic, PropertiesHoldAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const int buses = 2 + static_cast<int>(seed % 20);
    const int agents = 1 + static_cast<int>(seed % static_cast<std::uint64_t>(buses - 1));
    const auto m = generate_synthetic_feeder(buses, agents, seed);
    EXPECT_EQ(m.lines().size(), m.num_buses() - 1);
    EXPECT_TRUE(connected(m));
    EXPECT_EQ(m.num_agents(), static_cast<std::size_t>(agents));
    for (const auto& l : m.lines()) {
      EXPECT_TRUE(l.phases.subset_of(m.bus(l.from).phases));
      EXPECT_TRUE(l.phases.subset_of(m.bus(l.to).phases));
      EXPECT_TRUE(l.z.isApprox(l.z.transpose()));
    }
    const auto again = parse_network(serialize_network(m));
    EXPECT_EQ(serialize_network(again), serialize_network(m));
  }
}

TEST(Scenario, DeterministicForSeed) {
  const auto m = load_network(kData + "/feeder13.json");
  const auto a = sample_scenario(m, 99);
  const auto b = sample_scenario(m, 99);
  EXPECT_EQ(a.load, b.load);
  EXPECT_EQ(a.p_env, b.p_env);
  EXPECT_NE(sample_scenario(m, 100).p_env, a.p_env);
}

TEST(Scenario, SolarBoundedByTwiceLoadAndCapacity) {
  const auto m = load_network(kData + "/feeder13.json");
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto s = sample_scenario(m, seed);
    ASSERT_EQ(s.p_env.size(), m.num_agents());
    for (std::size_t i = 0; i < m.num_agents(); ++i) {
      const int bus = m.controllable()[i];
      const double x = (s.load[bus][0] + s.load[bus][1] + s.load[bus][2]).real();
      EXPECT_GE(s.p_env[i], 0.0);
      EXPECT_LE(s.p_env[i], std::min(2.0 * x, 0.9 * m.bus(bus).capacity));
    }
    for (std::size_t b = 1; b < m.num_buses(); ++b) {
      for (int p = 0; p < 3; ++p) {
        const double base = m.bus(b).load[p].real();
        EXPECT_GE(s.load[b][p].real(), 0.5 * base - 1e-15);
        EXPECT_LE(s.load[b][p].real(), 1.5 * base + 1e-15);
      }
    }
  }
}

TEST(Scenario, TenKilowattBusStaysWithinTwentyKilowatts) {
  // A single inverter bus with 10 kW of load and a large inverter.
  const std::string text = R"({"schema": 1, "base_kv": 1.0, "base_kva": 1000, "mode": "single_phase_equivalent",
    "buses": [{"id": 0, "phases": "A"}, {"id": 1, "phases": "A", "load_kw": [10], "load_kvar": [0],
              "inverter": {"s_kva": 1000}}],
    "lines": [{"from": 0, "to": 1, "phases": "A", "r_ohm": [[0.01]], "x_ohm": [[0.01]]}]})";
  const auto m = parse_network(text);
  LoadDistribution fixed{1.0, 1.0, false};
  double largest = 0.0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const double kw = sample_scenario(m, seed, fixed).p_env[0] * m.power_base_kva();
    EXPECT_GE(kw, 0.0);
    EXPECT_LE(kw, 20.0 + 1e-12);
    largest = std::max(largest, kw);
  }
  EXPECT_GT(largest, 19.0);
}

TEST(Scenario, ZeroLoadMeansNoSolar) {
  const std::string text = R"({"schema": 1, "base_kv": 1.0, "base_kva": 1000, "mode": "single_phase_equivalent",
    "buses": [{"id": 0, "phases": "A"}, {"id": 1, "phases": "A", "load_kw": [0], "load_kvar": [0],
              "inverter": {"s_kva": 100}}],
    "lines": [{"from": 0, "to": 1, "phases": "A", "r_ohm": [[0.01]], "x_ohm": [[0.01]]}]})";
  const auto m = parse_network(text);
  for (std::uint64_t seed = 0; seed < 50; ++seed) EXPECT_EQ(sample_scenario(m, seed).p_env[0], 0.0);
}

TEST(Scenario, DeepAndNoPv) {
  const auto m = load_network(kData + "/deep_pv8.json");
  const auto deep = deep_pv_scenario(m);
  const auto none = no_pv_scenario(m);
  for (std::size_t i = 0; i < m.num_agents(); ++i) {
    const int bus = m.controllable()[i];
    const double x = m.bus(bus).total_load().real();
    EXPECT_DOUBLE_EQ(deep.p_env[i], std::min(2.0 * x, 0.9 * m.bus(bus).capacity));
    EXPECT_EQ(none.p_env[i], 0.0);
  }
}
