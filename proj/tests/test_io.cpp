#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "dopf/aladin.hpp"
#include "dopf/io.hpp"
#include "dopf/partition.hpp"
#include "test_support.hpp"

namespace dopf {
namespace {

std::vector<RegionModel> fig1_regions(CouplingSystem* coupling = nullptr) {
  const NetworkCase grid = test::load_normalized("case6_fig1.m");
  auto regions = decompose(grid, load_region_map(test::data_path("case6_fig1_regions.txt")));
  if (coupling) *coupling = build_consensus(regions);
  return regions;
}

bool same_sparse(const SparseMatrix& a, const SparseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.nonZeros() != b.nonZeros()) return false;
  return Eigen::MatrixXd(a) == Eigen::MatrixXd(b);
}

TEST(JsonNumbers, NonFiniteValuesRoundTrip) {
  Eigen::VectorXd v(5);
  v << 1.0 / 3.0, -std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
      std::numeric_limits<double>::quiet_NaN(), 5e-324;
  const Eigen::VectorXd back = vector_from_json(Json::parse(vector_to_json(v).dump()));
  ASSERT_EQ(back.size(), 5);
  EXPECT_EQ(back[0], v[0]);
  EXPECT_EQ(back[1], v[1]);
  EXPECT_EQ(back[2], v[2]);
  EXPECT_TRUE(std::isnan(back[3]));
  EXPECT_EQ(back[4], v[4]);
  EXPECT_THROW(vector_from_json(Json::parse(R"([1, "x"])")), FormatError);
}

TEST(JsonNumbers, RandomDoublesRoundTripBitwise) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> exponent(-300, 300);
  std::uniform_real_distribution<double> mantissa(-1.0, 1.0);
  Eigen::VectorXd v(500);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::ldexp(mantissa(rng), exponent(rng));
  EXPECT_EQ(vector_from_json(Json::parse(vector_to_json(v).dump())), v);
}

TEST(SparseJson, RoundTripKeepsStructure) {
  SparseMatrix m(3, 4);
  m.insert(0, 1) = 0.1;
  m.insert(2, 3) = -7.25;
  m.insert(1, 0) = 0.0;  // explicit zero stays
  m.makeCompressed();
  const SparseMatrix back = sparse_from_json(Json::parse(sparse_to_json(m).dump()));
  EXPECT_TRUE(same_sparse(m, back));
  EXPECT_EQ(back.nonZeros(), 3);
  Json bad = sparse_to_json(m);
  bad["i"][0] = 9;
  EXPECT_THROW(sparse_from_json(bad), FormatError);
}

TEST(CaseJson, NormalizedCaseRoundTripsExactly) {
  const NetworkCase grid = test::load_normalized("case57.m");
  const NetworkCase back = case_from_json(Json::parse(case_to_json(grid).dump()));
  ASSERT_EQ(back.buses.size(), grid.buses.size());
  ASSERT_EQ(back.branches.size(), grid.branches.size());
  ASSERT_EQ(back.generators.size(), grid.generators.size());
  EXPECT_EQ(serialize_case(back), serialize_case(grid));
  for (std::size_t k = 0; k < grid.branches.size(); ++k) {
    EXPECT_EQ(back.branches[k].from, grid.branches[k].from);
    EXPECT_EQ(back.branches[k].series_x, grid.branches[k].series_x);
  }
  const auto y0 = build_admittance(grid);
  const auto y1 = build_admittance(back);
  EXPECT_TRUE(same_sparse(y0.G, y1.G));
  EXPECT_TRUE(same_sparse(y0.B, y1.B));
}

TEST(RegionFile, RoundTripGivesIdenticalLocalProblem) {
  CouplingSystem coupling;
  const auto regions = fig1_regions(&coupling);
  std::mt19937 rng(5);
  for (std::size_t l = 0; l < regions.size(); ++l) {
    const RegionFile file{regions[l], coupling.A[l], coupling.rows()};
    const RegionFile back = parse_region_file(region_file_json(file));
    EXPECT_EQ(back.region.region_id, regions[l].region_id);
    EXPECT_EQ(back.region.num_core, regions[l].num_core);
    EXPECT_EQ(back.region.global_bus, regions[l].global_bus);
    EXPECT_EQ(back.region.copy_owner, regions[l].copy_owner);
    EXPECT_TRUE(same_sparse(back.coupling_block, file.coupling_block));

    AladinConfig cfg;
    const LocalModel a = make_local_model(regions[l], cfg);
    const LocalModel b = make_local_model(back.region, cfg);
    EXPECT_EQ(a.sigma, b.sigma);
    EXPECT_EQ(a.problem.lower, b.problem.lower);
    EXPECT_EQ(a.problem.upper, b.problem.upper);
    std::uniform_real_distribution<double> u(-0.2, 0.2);
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::VectorXd x = region_flat_start(regions[l]);
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += u(rng);
      EXPECT_EQ(a.problem.objective(x), b.problem.objective(x));
      EXPECT_EQ(a.problem.eq(x), b.problem.eq(x));
      EXPECT_EQ(a.problem.ineq(x), b.problem.ineq(x));
    }
  }
}

TEST(RegionFile, RejectsInconsistentDocuments) {
  CouplingSystem coupling;
  const auto regions = fig1_regions(&coupling);
  Json doc = Json::parse(region_file_json({regions[0], coupling.A[0], coupling.rows()}));
  EXPECT_THROW(parse_region_file("not json"), FormatError);

  Json wrong_version = doc;
  wrong_version["version"] = 2;
  EXPECT_THROW(parse_region_file(wrong_version.dump()), FormatError);

  Json wrong_rows = doc;
  wrong_rows["num_consensus"] = coupling.rows() + 1;
  EXPECT_THROW(parse_region_file(wrong_rows.dump()), FormatError);

  Json missing = doc;
  missing["region"]["grid"]["buses"][0].erase("v_max");
  EXPECT_THROW(parse_region_file(missing.dump()), FormatError);

  Json bad_owner = doc;
  bad_owner["region"]["copy_owner"].push_back(0);
  EXPECT_THROW(parse_region_file(bad_owner.dump()), FormatError);
}

TEST(CouplingFile, RoundTrip) {
  CouplingSystem coupling;
  const auto regions = fig1_regions(&coupling);
  const CouplingSystem back = parse_coupling(coupling_json(coupling));
  ASSERT_EQ(back.num_regions(), coupling.num_regions());
  ASSERT_EQ(back.rows(), coupling.rows());
  EXPECT_EQ(back.b, coupling.b);
  EXPECT_EQ(back.dims, coupling.dims);
  for (std::size_t l = 0; l < coupling.num_regions(); ++l) {
    EXPECT_TRUE(same_sparse(back.A[l], coupling.A[l]));
  }
  for (std::size_t i = 0; i < coupling.rows(); ++i) {
    EXPECT_EQ(back.rows_info[i].bus_id, coupling.rows_info[i].bus_id);
    EXPECT_EQ(back.rows_info[i].quantity, coupling.rows_info[i].quantity);
    EXPECT_EQ(back.rows_info[i].owner, coupling.rows_info[i].owner);
    EXPECT_EQ(back.rows_info[i].copier, coupling.rows_info[i].copier);
  }
  Json doc = Json::parse(coupling_json(coupling));
  doc["dims"].push_back(3);
  EXPECT_THROW(parse_coupling(doc.dump()), FormatError);
}

TEST(TextFile, WriteIsAtomicRename) {
  test::TempDir dir;
  const std::string path = (dir.path() / "a.json").string();
  write_text_file(path, "first");
  write_text_file(path, "second");
  EXPECT_EQ(read_text_file(path), "second");
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  EXPECT_THROW(read_text_file((dir.path() / "missing").string()), FormatError);
}

TEST(JsonKeys, CollectsNestedKeys) {
  const Json j = Json::parse(R"({"a": [{"b": 1}, {"c": {"d": 2}}], "e": 3})");
  EXPECT_EQ(json_keys(j), (std::set<std::string>{"a", "b", "c", "d", "e"}));
}

}  // namespace
}  // namespace dopf
