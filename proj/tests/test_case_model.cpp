#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "dopf/case_model.hpp"
#include "test_support.hpp"

namespace dopf {
namespace {

constexpr const char* kOneBus = R"(function mpc = one_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 10 -10 1 100 1 50 0;
];
mpc.branch = [
];
mpc.gencost = [
  2 0 0 3 0.01 10 0;
];
)";

std::string two_bus(const std::string& branch_row, const std::string& extra_bus = "") {
  return std::string("mpc.baseMVA = 100;\nmpc.bus = [\n"
                     "1 3 0 0 0 0 1 1 0 230 1 1.06 0.94;\n"
                     "2 1 50 20 0 0 1 1 0 230 1 1.06 0.94;\n") +
         extra_bus +
         "];\nmpc.gen = [\n1 0 0 100 -100 1 100 1 200 0;\n];\n"
         "mpc.branch = [\n" +
         branch_row +
         "\n];\nmpc.gencost = [\n2 0 0 3 0.01 10 0;\n];\n";
}

TEST(ParseCase, OneBusCase) {
  NetworkCase c = parse_case(kOneBus);
  EXPECT_EQ(c.buses.size(), 1u);
  EXPECT_EQ(c.generators.size(), 1u);
  EXPECT_EQ(c.branches.size(), 0u);
  EXPECT_TRUE(c.buses[0].is_reference);
  EXPECT_DOUBLE_EQ(c.costs[0].a2, 0.01);
  EXPECT_DOUBLE_EQ(c.costs[0].a1, 10.0);
  EXPECT_FALSE(c.per_unit);
}

TEST(ParseCase, Ieee57Counts) {
  NetworkCase c = load_case(test::data_path("case57.m"));
  EXPECT_EQ(c.buses.size(), 57u);
  EXPECT_EQ(c.branches.size(), 80u);
  EXPECT_EQ(c.generators.size(), 7u);
  EXPECT_EQ(c.costs.size(), 7u);
  EXPECT_DOUBLE_EQ(c.base_power, 100.0);
}

TEST(ParseCase, MergedCaseCounts) {
  NetworkCase c = load_case(test::data_path("itd_case.m"));
  EXPECT_EQ(c.buses.size(), 57u + 2u * 33u);
  EXPECT_EQ(c.branches.size(), 80u + 2u * 32u + 2u);
  EXPECT_EQ(c.generators.size(), 7u);
}

TEST(ParseCase, DanglingBranchReference) {
  try {
    parse_case(two_bus("1 99 0.01 0.1 0 0 0 0 0 0 1 -360 360;"));
    FAIL() << "expected CaseError";
  } catch (const CaseError& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos);
    EXPECT_GT(e.line(), 0);
  }
}

TEST(ParseCase, DanglingGeneratorReference) {
  std::string text = two_bus("1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;");
  text.replace(text.find("1 0 0 100"), 1, "7");
  EXPECT_THROW(parse_case(text), CaseError);
}

TEST(ParseCase, SyntaxErrorReportsLine) {
  std::string text = two_bus("1 2 0.01 abc 0 0 0 0 0 0 1 -360 360;");
  try {
    parse_case(text);
    FAIL() << "expected CaseError";
  } catch (const CaseError& e) {
    EXPECT_EQ(e.line(), 10);
  }
}

TEST(ParseCase, UnterminatedMatrix) {
  std::string text = "mpc.baseMVA = 100;\nmpc.bus = [\n1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n";
  EXPECT_THROW(parse_case(text), CaseError);
}

TEST(ParseCase, MissingTable) {
  std::string text = kOneBus;
  text.erase(text.find("mpc.gencost"));
  EXPECT_THROW(parse_case(text), CaseError);
}

TEST(ParseCase, MissingBaseMva) {
  std::string text = kOneBus;
  text.replace(text.find("mpc.baseMVA = 100;"), 18, "");
  EXPECT_THROW(parse_case(text), CaseError);
}

TEST(ParseCase, RejectsUnsupportedCostModels) {
  std::string pwl = kOneBus;
  pwl.replace(pwl.find("2 0 0 3 0.01"), 1, "1");
  EXPECT_THROW(parse_case(pwl), CaseError);

  std::string unknown = kOneBus;
  unknown.replace(unknown.find("2 0 0 3 0.01"), 1, "5");
  EXPECT_THROW(parse_case(unknown), CaseError);

  std::string cubic = kOneBus;
  cubic.replace(cubic.find("2 0 0 3 0.01 10 0"), 17, "2 0 0 4 1 0.01 10 0");
  EXPECT_THROW(parse_case(cubic), CaseError);
}

TEST(ParseCase, AcceptsLinearAndConstantCosts) {
  std::string linear = kOneBus;
  linear.replace(linear.find("2 0 0 3 0.01 10 0"), 17, "2 0 0 2 10 5");
  NetworkCase c = parse_case(linear);
  EXPECT_DOUBLE_EQ(c.costs[0].a2, 0.0);
  EXPECT_DOUBLE_EQ(c.costs[0].a1, 10.0);
  EXPECT_DOUBLE_EQ(c.costs[0].a0, 5.0);
}

TEST(ParseCase, RequiresExactlyOneReference) {
  std::string none = kOneBus;
  none.replace(none.find("1 3 0 0"), 3, "1 1");
  EXPECT_THROW(parse_case(none), CaseError);
  EXPECT_THROW(parse_case(two_bus("1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;",
                                  "3 3 0 0 0 0 1 1 0 230 1 1.06 0.94;\n")),
               CaseError);
}

TEST(ParseCase, DuplicateBusId) {
  EXPECT_THROW(parse_case(two_bus("1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;",
                                  "2 1 0 0 0 0 1 1 0 230 1 1.06 0.94;\n")),
               CaseError);
}

TEST(ParseCase, InvalidLimits) {
  EXPECT_THROW(parse_case(two_bus("1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;",
                                  "3 1 0 0 0 0 1 1 0 230 1 0.9 1.1;\n")),
               CaseError);
  std::string inverted = kOneBus;
  inverted.replace(inverted.find("1 100 1 50 0"), 12, "1 100 1 5 50");
  EXPECT_THROW(parse_case(inverted), CaseError);
}

TEST(ParseCase, DropsOutOfServiceElements) {
  std::string text = two_bus(
      "1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;\n1 2 0.02 0.2 0 0 0 0 0 0 0 -360 360;");
  NetworkCase c = parse_case(text);
  EXPECT_EQ(c.branches.size(), 1u);
  EXPECT_DOUBLE_EQ(c.branches[0].series_x, 0.1);
}

TEST(ParseCase, WarnsOnUnknownFieldsAndExtraColumns) {
  std::string text = kOneBus;
  text += "mpc.bus_name = {\n'one';\n};\nmpc.areas = [1 1];\nx = 3;\n";
  text.replace(text.find("1 50 0;"), 7, "1 50 0 0 0 0;");
  std::vector<std::string> warnings;
  NetworkCase c = parse_case(text, &warnings);
  EXPECT_EQ(c.generators.size(), 1u);
  EXPECT_GE(warnings.size(), 4u);
}

TEST(ParseCase, TapZeroMeansNominal) {
  NetworkCase c = parse_case(two_bus("1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;"));
  EXPECT_DOUBLE_EQ(c.branches[0].tap_ratio, 1.0);
}

TEST(Normalize, PerUnitConversion) {
  NetworkCase c = normalize(parse_case(two_bus("1 2 0.01 0.1 0 120 0 0 0 30 1 -360 360;")));
  EXPECT_TRUE(c.per_unit);
  EXPECT_DOUBLE_EQ(c.buses[1].p_load, 0.5);
  EXPECT_DOUBLE_EQ(c.buses[1].q_load, 0.2);
  EXPECT_DOUBLE_EQ(c.buses[1].v_min, 0.94);
  EXPECT_DOUBLE_EQ(c.buses[1].v_max, 1.06);
  EXPECT_DOUBLE_EQ(c.branches[0].s_max, 1.2);
  EXPECT_NEAR(c.branches[0].phase_shift, M_PI / 6.0, 1e-15);
  EXPECT_DOUBLE_EQ(c.generators[0].p_max, 2.0);
  EXPECT_EQ(c.branches[0].from, 0u);
  EXPECT_EQ(c.branches[0].to, 1u);
  // Costs stay in physical units.
  EXPECT_DOUBLE_EQ(c.costs[0].a2, 0.01);
}

TEST(Normalize, Idempotent) {
  NetworkCase once = test::load_normalized("case57.m");
  NetworkCase twice = normalize(once);
  EXPECT_EQ(serialize_case(once), serialize_case(twice));
  for (std::size_t i = 0; i < once.buses.size(); ++i) {
    EXPECT_EQ(once.buses[i].p_load, twice.buses[i].p_load);
  }
}

TEST(Normalize, RejectsNonPositiveBase) {
  NetworkCase c = parse_case(kOneBus);
  c.base_power = 0.0;
  EXPECT_THROW(normalize(c), CaseError);
}

TEST(Admittance, SingleReactance) {
  NetworkCase c = normalize(parse_case(two_bus("1 2 0 0.1 0 0 0 0 0 0 1 -360 360;")));
  AdmittanceMatrix y = build_admittance(c);
  Eigen::MatrixXd b = Eigen::MatrixXd(y.B);
  Eigen::MatrixXd g = Eigen::MatrixXd(y.G);
  Eigen::Matrix2d expected;
  expected << -10, 10, 10, -10;
  EXPECT_LT((b - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Admittance, ShuntOnly) {
  std::string text = kOneBus;
  text.replace(text.find("1 3 0 0 0 0"), 11, "1 3 0 0 0 5");
  AdmittanceMatrix y = build_admittance(normalize(parse_case(text)));
  ASSERT_EQ(y.B.rows(), 1);
  EXPECT_DOUBLE_EQ(y.B.coeff(0, 0), 0.05);
}

TEST(Admittance, ZeroImpedanceRejected) {
  NetworkCase c = normalize(parse_case(two_bus("1 2 0 0 0 0 0 0 0 0 1 -360 360;")));
  EXPECT_THROW(build_admittance(c), CaseError);
}

TEST(Admittance, RequiresNormalizedCase) {
  EXPECT_THROW(build_admittance(parse_case(kOneBus)), std::invalid_argument);
}

// Strip shunts, taps and shifts from a real case to test the no-shunt identities.
NetworkCase plain_case57() {
  NetworkCase c = test::load_normalized("case57.m");
  for (auto& b : c.buses) {
    b.shunt_g = b.shunt_b = 0.0;
  }
  for (auto& br : c.branches) {
    br.tap_ratio = 1.0;
    br.phase_shift = 0.0;
  }
  return c;
}

TEST(Admittance, RowSumsVanishWithoutShunts) {
  NetworkCase c = plain_case57();
  for (auto& br : c.branches) {
    br.charging_b = 0.0;
  }
  AdmittanceMatrix y = build_admittance(c);
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(y.G.cols());
  EXPECT_LT((y.G * ones).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((y.B * ones).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Admittance, SymmetricWithoutTaps) {
  AdmittanceMatrix y = build_admittance(plain_case57());
  SparseMatrix gt = y.G.transpose();
  SparseMatrix bt = y.B.transpose();
  EXPECT_EQ(Eigen::MatrixXd(y.G - gt).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(Eigen::MatrixXd(y.B - bt).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Admittance, NonzerosPerRowIsOnePlusDegree) {
  for (const char* name : {"case57.m", "itd_case.m", "case6_fig1.m"}) {
    NetworkCase c = test::load_normalized(name);
    AdmittanceMatrix y = build_admittance(c);
    std::vector<std::set<std::size_t>> adj(c.buses.size());
    for (const auto& br : c.branches) {
      adj[br.from].insert(br.to);
      adj[br.to].insert(br.from);
    }
    SparseMatrix g = y.G;
    g.makeCompressed();
    for (Eigen::Index col = 0; col < g.outerSize(); ++col) {
      const auto nnz = g.outerIndexPtr()[col + 1] - g.outerIndexPtr()[col];
      EXPECT_EQ(static_cast<std::size_t>(nnz), 1 + adj[static_cast<std::size_t>(col)].size())
          << name << " bus index " << col;
    }
  }
}

void expect_round_trip(const NetworkCase& a, const NetworkCase& b) {
  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-12 * std::max(1.0, std::abs(y));
  };
  ASSERT_EQ(a.buses.size(), b.buses.size());
  ASSERT_EQ(a.branches.size(), b.branches.size());
  ASSERT_EQ(a.generators.size(), b.generators.size());
  EXPECT_TRUE(close(a.base_power, b.base_power));
  for (std::size_t i = 0; i < a.buses.size(); ++i) {
    const Bus& x = a.buses[i];
    const Bus& y = b.buses[i];
    EXPECT_EQ(x.id, y.id);
    EXPECT_EQ(x.is_reference, y.is_reference);
    for (auto [u, w] : {std::pair{x.v_min, y.v_min}, {x.v_max, y.v_max}, {x.p_load, y.p_load},
                        {x.q_load, y.q_load}, {x.shunt_g, y.shunt_g}, {x.shunt_b, y.shunt_b}}) {
      EXPECT_TRUE(close(u, w)) << u << " vs " << w;
    }
  }
  for (std::size_t k = 0; k < a.branches.size(); ++k) {
    const Branch& x = a.branches[k];
    const Branch& y = b.branches[k];
    EXPECT_EQ(x.from_bus, y.from_bus);
    EXPECT_EQ(x.to_bus, y.to_bus);
    for (auto [u, w] : {std::pair{x.series_r, y.series_r}, {x.series_x, y.series_x},
                        {x.charging_b, y.charging_b}, {x.tap_ratio, y.tap_ratio},
                        {x.phase_shift, y.phase_shift}, {x.s_max, y.s_max}}) {
      EXPECT_TRUE(close(u, w)) << u << " vs " << w;
    }
  }
  for (std::size_t g = 0; g < a.generators.size(); ++g) {
    const Generator& x = a.generators[g];
    const Generator& y = b.generators[g];
    EXPECT_EQ(x.bus, y.bus);
    for (auto [u, w] : {std::pair{x.p_min, y.p_min}, {x.p_max, y.p_max}, {x.q_min, y.q_min},
                        {x.q_max, y.q_max}, {x.p_init, y.p_init}, {x.q_init, y.q_init},
                        {a.costs[g].a2, b.costs[g].a2}, {a.costs[g].a1, b.costs[g].a1},
                        {a.costs[g].a0, b.costs[g].a0}}) {
      EXPECT_TRUE(close(u, w)) << u << " vs " << w;
    }
  }
}

TEST(Serialize, RoundTripShippedCases) {
  for (const char* name : {"case57.m", "itd_case.m", "case6_fig1.m", "case33bw.m"}) {
    SCOPED_TRACE(name);
    NetworkCase n = test::load_normalized(name);
    NetworkCase again = normalize(parse_case(serialize_case(n)));
    expect_round_trip(again, n);
  }
}

TEST(Serialize, RoundTripRandomValues) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int rep = 0; rep < 20; ++rep) {
    NetworkCase c = parse_case(two_bus("1 2 0.01 0.1 0.02 90 0 0 0.97 2 1 -360 360;"));
    for (auto& b : c.buses) {
      b.p_load = u(rng) * 100.0;
      b.q_load = u(rng) * 10.0;
      b.shunt_b = u(rng);
    }
    c.branches[0].series_r = std::abs(u(rng)) / 7.0;
    c.branches[0].phase_shift = u(rng) * 10.0;
    c.costs[0].a1 = std::abs(u(rng)) * 33.3;
    NetworkCase n = normalize(c);
    expect_round_trip(normalize(parse_case(serialize_case(n))), n);
    expect_round_trip(normalize(parse_case(serialize_case(c))), n);
  }
}

TEST(Cost, EvaluatesQuadraticInMegawatts) {
  EXPECT_DOUBLE_EQ(evaluate_cost({0.01, 10.0, 0.0}, 100.0), 1100.0);
}

}  // namespace
}  // namespace dopf
