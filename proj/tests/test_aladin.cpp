#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "dopf/aladin.hpp"
#include "dopf/opf.hpp"
#include "fixtures.hpp"
#include "test_support.hpp"

namespace dopf {
namespace {

using test::dense_coupling;
using test::quadratic_model;
using test::random_matrix;
using test::random_spd;

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Fig1 {
  NetworkCase grid = test::load_normalized("case6_fig1.m");
  std::vector<RegionModel> regions =
      decompose(grid, load_region_map(test::data_path("case6_fig1_regions.txt")));
  CouplingSystem coupling = build_consensus(regions);
  AladinConfig config;
};

double min_eigenvalue(const Eigen::MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues()[0];
}

TEST(AladinConfig, DefaultsAndValidation) {
  AladinConfig c;
  EXPECT_EQ(c.rho0, 100.0);
  EXPECT_EQ(c.rho_growth, 2.0);
  EXPECT_EQ(c.rho_max, 1e6);
  EXPECT_EQ(c.eps, 1e-6);
  EXPECT_EQ(c.max_iter, 50);
  EXPECT_NO_THROW(c.validate());
  AladinConfig bad = c;
  bad.rho0 = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.sigma_power = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = c;
  bad.eps = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_EQ(regularization_from_string(to_string(Regularization::null_space)),
            Regularization::null_space);
  EXPECT_THROW(regularization_from_string("magic"), std::invalid_argument);
}

TEST(LocalStep, ToyHitsLowerBound) {
  LocalModel m = quadratic_model(0, Eigen::MatrixXd::Constant(1, 1, 2.0),
                                 Eigen::VectorXd::Constant(1, -2.0), Eigen::MatrixXd(0, 1),
                                 Eigen::VectorXd(0));
  // (x - 1)^2 differs from the quadratic above by a constant only.
  m.problem.lower[0] = 0;
  m.problem.upper[0] = 10;
  SparseMatrix a(1, 1);
  a.insert(0, 0) = 1.0;
  LocalSolution s = local_step(m, Eigen::VectorXd::Zero(1), a, Eigen::VectorXd::Constant(1, 2.0),
                               2.0, AladinConfig{}.local_nlp);
  // Zero bound multiplier at the solution: the barrier leaves x ~ sqrt(mu).
  EXPECT_NEAR(s.x[0], 0.0, 1e-5);
  EXPECT_GE(s.x[0], 0.0);
}

TEST(LocalStep, ProximalTermDominatesForLargeRho) {
  Fig1 f;
  OpfResult ref = solve_centralized_opf(f.grid);
  const std::vector<Eigen::VectorXd> z = scatter(f.regions, ref.solution.x);
  const Eigen::VectorXd lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(f.coupling.rows()));
  for (std::size_t l = 0; l < f.regions.size(); ++l) {
    LocalModel m = make_local_model(f.regions[l], f.config);
    // rho Sigma = 1e10 puts the attainable KKT residual near 1e-10.
    LocalSolution s = local_step(m, z[l], f.coupling.A[l], lambda, 1e8, NlpOptions{});
    EXPECT_LE((s.x - z[l]).lpNorm<Eigen::Infinity>(), 1e-4);
  }
}

TEST(LocalStep, FlatStartSolutionSatisfiesBalance) {
  Fig1 f;
  const Eigen::VectorXd lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(f.coupling.rows()));
  LocalModel m = make_local_model(f.regions[0], f.config);
  LocalSolution s = local_step(m, region_flat_start(f.regions[0]), f.coupling.A[0], lambda,
                               f.config.rho0, f.config.local_nlp);
  EXPECT_LE(m.problem.eq(s.x).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_EQ(s.kappa.size(), static_cast<Eigen::Index>(2 * f.regions[0].num_core));
  EXPECT_NEAR(s.objective, m.problem.objective(s.x), 0.0);
}

TEST(LocalStep, FailureIsTaggedWithRegion) {
  // x = 20 with x in [0, 10]: infeasible.
  LocalModel m = quadratic_model(7, Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::VectorXd::Zero(1),
                                 Eigen::MatrixXd::Constant(1, 1, 1.0),
                                 Eigen::VectorXd::Constant(1, 20.0));
  m.problem.lower[0] = 0;
  m.problem.upper[0] = 10;
  SparseMatrix a(0, 1);
  NlpOptions o;
  o.max_iter = 60;
  try {
    local_step(m, Eigen::VectorXd::Zero(1), a, Eigen::VectorXd(0), 1.0, o);
    FAIL() << "expected AladinError";
  } catch (const AladinError& e) {
    EXPECT_EQ(e.region_id(), 7);
    EXPECT_NE(e.status(), NlpStatus::optimal);
  }
}

TEST(LocalStep, RejectsDimensionMismatch) {
  Fig1 f;
  LocalModel m = make_local_model(f.regions[0], f.config);
  EXPECT_THROW(local_step(m, Eigen::VectorXd::Zero(3), f.coupling.A[0],
                          Eigen::VectorXd::Zero(static_cast<Eigen::Index>(f.coupling.rows())), 1.0),
               std::invalid_argument);
}

TEST(Sensitivities, GradientIsObjectiveOnlyAndDimensionsMatch) {
  Fig1 f;
  const Eigen::VectorXd lambda =
      Eigen::VectorXd::Constant(static_cast<Eigen::Index>(f.coupling.rows()), 50.0);
  for (std::size_t l = 0; l < f.regions.size(); ++l) {
    LocalModel m = make_local_model(f.regions[l], f.config);
    LocalSolution s = local_step(m, region_flat_start(f.regions[l]), f.coupling.A[l], lambda,
                                 f.config.rho0, f.config.local_nlp);
    SensitivityPacket p = sensitivities(m, s, f.config);
    const Eigen::MatrixXd fd = test::fd_jacobian(
        [&](const Eigen::VectorXd& x) { return Eigen::VectorXd::Constant(1, m.problem.objective(x)); },
        s.x, 1e-5);
    EXPECT_LE(test::relative_error(p.gradient.transpose(), fd), 1e-6);
    EXPECT_EQ(p.jacobian.rows(), static_cast<Eigen::Index>(2 * f.regions[l].num_core));
    EXPECT_EQ(p.gradient.size(), static_cast<Eigen::Index>(f.regions[l].dim()));
    EXPECT_EQ(p.region_id, f.regions[l].region_id);
    const Eigen::MatrixXd h(p.hessian);
    EXPECT_LE((h - h.transpose()).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, h.cwiseAbs().maxCoeff()));
    EXPECT_GE(min_eigenvalue(h), f.config.reg_delta * (1 - 1e-6));
    EXPECT_TRUE(((p.delta_lower.array() <= 0) && (p.delta_upper.array() >= 0)).all());
  }
}

TEST(Sensitivities, QuadraticHessianIsExactAndConstant) {
  std::mt19937 rng(3);
  const Eigen::MatrixXd q = random_spd(rng, 4);
  LocalModel m = quadratic_model(0, q, Eigen::VectorXd::Ones(4), random_matrix(rng, 1, 4),
                                 Eigen::VectorXd::Ones(1));
  AladinConfig config;
  for (int k = 0; k < 3; ++k) {
    LocalSolution s{random_matrix(rng, 4, 1), Eigen::VectorXd::Constant(1, k), 0.0, 0};
    EXPECT_EQ(Eigen::MatrixXd(sensitivities(m, s, config).hessian), q);
  }
}

TEST(RegularizeHessian, PositiveDefiniteInputIsUnchanged) {
  std::mt19937 rng(5);
  const Eigen::MatrixXd h = random_spd(rng, 5);
  const SparseMatrix hs = h.sparseView();
  const SparseMatrix j = random_matrix(rng, 2, 5).sparseView();
  for (Regularization mode : {Regularization::shift, Regularization::clip, Regularization::null_space}) {
    EXPECT_EQ(Eigen::MatrixXd(regularize_hessian(hs, 1e-6, mode, &j)), h);
  }
}

TEST(RegularizeHessian, ShiftOfIndefiniteDiagonal) {
  SparseMatrix h(2, 2);
  h.insert(0, 0) = 1.0;
  h.insert(1, 1) = -2.0;
  const Eigen::MatrixXd r(regularize_hessian(h, 1e-6, Regularization::shift));
  const double sigma = 2.0 + 1e-6;
  EXPECT_NEAR(r(0, 0), 1.0 + sigma, 1e-12);
  EXPECT_NEAR(r(1, 1), -2.0 + sigma, 1e-12);
  EXPECT_EQ(r(0, 1), 0.0);
  EXPECT_NEAR(min_eigenvalue(r), 1e-6, 1e-12);
}

TEST(RegularizeHessian, ShiftFrobeniusDistanceIsSigmaRootN) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 2 + trial % 6;
    Eigen::MatrixXd a = random_matrix(rng, n, n);
    const Eigen::MatrixXd h = a + a.transpose();
    const double sigma = std::max(0.0, 1e-6 - min_eigenvalue(h));
    const Eigen::MatrixXd r(regularize_hessian(h.sparseView(), 1e-6, Regularization::shift));
    EXPECT_NEAR((r - h).norm(), sigma * std::sqrt(static_cast<double>(n)), 1e-9 * (1 + sigma));
    EXPECT_GE(min_eigenvalue(r), 1e-6 - 1e-9);
  }
}

TEST(RegularizeHessian, ClipAndNullSpaceArePositiveDefinite) {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 3 + trial % 5;
    Eigen::MatrixXd a = random_matrix(rng, n, n);
    const Eigen::MatrixXd h = a + a.transpose();
    const SparseMatrix j = random_matrix(rng, 1 + trial % 2, n).sparseView();
    for (Regularization mode : {Regularization::clip, Regularization::null_space}) {
      const Eigen::MatrixXd r(regularize_hessian(h.sparseView(), 1e-6, mode, &j));
      EXPECT_LE((r - r.transpose()).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_GE(min_eigenvalue(r), 1e-6 * (1 - 1e-6) - 1e-12);
    }
  }
}

TEST(RegularizeHessian, NullSpaceModeKeepsReducedCurvature) {
  // H indefinite overall but positive definite on null(J): the reduced Hessian
  // and hence the QP step must survive the regularization.
  std::mt19937 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 5;
    const Eigen::MatrixXd j = random_matrix(rng, 2, n);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(j, Eigen::ComputeFullV);
    const Eigen::MatrixXd z = svd.matrixV().rightCols(n - 2);
    const Eigen::MatrixXd y = svd.matrixV().leftCols(2);
    const Eigen::MatrixXd cross = z * random_matrix(rng, n - 2, 2) * y.transpose();
    const Eigen::MatrixXd h = z * random_spd(rng, n - 2) * z.transpose() -
                              10.0 * y * y.transpose() + cross + cross.transpose();
    ASSERT_LT(min_eigenvalue(h), 0.0);
    const SparseMatrix js = j.sparseView();
    const Eigen::MatrixXd r(regularize_hessian(h.sparseView(), 1e-6, Regularization::null_space, &js));
    EXPECT_LE((z.transpose() * (r - h) * z).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_THROW(regularize_hessian(h.sparseView(), 1e-6, Regularization::null_space),
                 std::invalid_argument);
  }
}

SensitivityPacket scalar_packet(int id, double x, double h, double g) {
  SensitivityPacket p;
  p.region_id = id;
  p.x = Eigen::VectorXd::Constant(1, x);
  p.gradient = Eigen::VectorXd::Constant(1, g);
  p.jacobian = SparseMatrix(0, 1);
  SparseMatrix hs(1, 1);
  hs.insert(0, 0) = h;
  p.hessian = hs;
  p.delta_lower = Eigen::VectorXd::Constant(1, -1e3);
  p.delta_upper = Eigen::VectorXd::Constant(1, 1e3);
  return p;
}

TEST(Coordination, TwoScalarRegionsMeetInTheMiddle) {
  const CouplingSystem c = dense_coupling({Eigen::MatrixXd::Constant(1, 1, 1.0),
                                           Eigen::MatrixXd::Constant(1, 1, -1.0)},
                                          Eigen::VectorXd::Zero(1));
  CoordinationResult r = coordination_step({scalar_packet(0, 0.0, 1, 0), scalar_packet(1, 2.0, 1, 0)}, c);
  EXPECT_NEAR(r.delta[0][0], 1.0, 1e-8);
  EXPECT_NEAR(r.delta[1][0], -1.0, 1e-8);
  EXPECT_NEAR(r.delta[0][0] + 0.0, r.delta[1][0] + 2.0, 1e-8);
}

TEST(Coordination, FeasibleStationaryPointGivesZeroStep) {
  const CouplingSystem c = dense_coupling({Eigen::MatrixXd::Constant(1, 1, 1.0),
                                           Eigen::MatrixXd::Constant(1, 1, -1.0)},
                                          Eigen::VectorXd::Zero(1));
  CoordinationResult r = coordination_step({scalar_packet(0, 1.5, 2, 0), scalar_packet(1, 1.5, 3, 0)}, c);
  EXPECT_NEAR(r.delta[0][0], 0.0, 1e-9);
  EXPECT_NEAR(r.delta[1][0], 0.0, 1e-9);
  EXPECT_NEAR(r.lambda[0], 0.0, 1e-8);
}

TEST(Coordination, OutputIsFeasibleOnOpfPackets) {
  Fig1 f;
  const Eigen::VectorXd lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(f.coupling.rows()));
  std::vector<SensitivityPacket> packets;
  for (std::size_t l = 0; l < f.regions.size(); ++l) {
    LocalModel m = make_local_model(f.regions[l], f.config);
    packets.push_back(sensitivities(
        m,
        local_step(m, region_flat_start(f.regions[l]), f.coupling.A[l], lambda, f.config.rho0,
                   f.config.local_nlp),
        f.config));
  }
  CoordinationResult r = coordination_step(packets, f.coupling, f.config.qp);
  std::vector<Eigen::VectorXd> next;
  for (std::size_t l = 0; l < packets.size(); ++l) {
    next.push_back(packets[l].x + r.delta[l]);
    EXPECT_LE((packets[l].jacobian * r.delta[l]).lpNorm<Eigen::Infinity>(), 1e-8);
    EXPECT_TRUE(((r.delta[l] - packets[l].delta_lower).array() >= 0).all());
    EXPECT_TRUE(((packets[l].delta_upper - r.delta[l]).array() >= 0).all());
  }
  EXPECT_LE(f.coupling.residual(next).lpNorm<Eigen::Infinity>(), 1e-8);
  packets.pop_back();
  EXPECT_THROW(coordination_step(packets, f.coupling), std::invalid_argument);
}

TEST(Update, FixedPointAndRhoSchedule) {
  AladinConfig config;
  AladinState s = initial_state({Eigen::VectorXd::Ones(2)}, 1, config);
  s.x = {Eigen::Vector2d(0.5, 0.25)};
  CoordinationResult step{{Eigen::VectorXd::Zero(2)}, Eigen::VectorXd::Zero(1), 0};
  for (int k = 1; k <= 20; ++k) {
    update(s, step, config);
    EXPECT_EQ(s.iteration, k);
    EXPECT_EQ(s.rho, std::min(config.rho0 * std::pow(config.rho_growth, k), config.rho_max));
    EXPECT_EQ(s.z[0], s.x[0]);
    EXPECT_EQ(s.lambda, Eigen::VectorXd::Zero(1));
  }
  step.delta.clear();
  EXPECT_THROW(update(s, step, config), std::invalid_argument);
}

TEST(Residuals, ZeroCases) {
  Fig1 f;
  OpfResult ref = solve_centralized_opf(f.grid);
  const std::vector<Eigen::VectorXd> x = scatter(f.regions, ref.solution.x);
  Residuals r = residuals(x, x, f.coupling);
  EXPECT_EQ(r.primal, 0.0);
  EXPECT_EQ(r.dual, 0.0);
  std::vector<Eigen::VectorXd> z = x;
  z[1][0] += 0.25;
  EXPECT_EQ(residuals(x, z, f.coupling).dual, 0.25);
}

TEST(Iteration, FigOneTraceInvariants) {
  Fig1 f;
  std::vector<LocalModel> locals;
  AladinState state = initial_state({}, f.coupling.rows(), f.config);
  for (const auto& r : f.regions) {
    locals.push_back(make_local_model(r, f.config));
    state.z.push_back(region_flat_start(r));
  }
  state.x = state.z;
  std::vector<Residuals> history;
  for (int k = 0; k < 6; ++k) {
    std::vector<SensitivityPacket> packets;
    for (std::size_t l = 0; l < locals.size(); ++l) {
      LocalSolution s = local_step(locals[l], state.z[l], f.coupling.A[l], state.lambda,
                                   state.rho, f.config.local_nlp);
      EXPECT_LE(locals[l].problem.eq(s.x).lpNorm<Eigen::Infinity>(), 1e-8);
      state.x[l] = s.x;
      packets.push_back(sensitivities(locals[l], s, f.config));
    }
    history.push_back(residuals(state.x, state.z, f.coupling));
    update(state, coordination_step(packets, f.coupling, f.config.qp), f.config);
    EXPECT_LE(f.coupling.residual(state.z).lpNorm<Eigen::Infinity>(), 1e-8);
  }
  for (int k = 2; k <= 5; ++k) {
    EXPECT_GT(history[k].primal, 0.0);
    EXPECT_GT(history[k].dual, 0.0);
    if (k > 2) {
      EXPECT_LT(history[k].primal, history[k - 1].primal) << k;
      EXPECT_LT(history[k].dual, history[k - 1].dual) << k;
    }
  }
}

TEST(Iteration, ConvexQpConvergesInOneIteration) {
  std::mt19937 rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n1 = 3 + trial % 3, n2 = 4;
    const Eigen::MatrixXd q1 = random_spd(rng, n1), q2 = random_spd(rng, n2);
    const Eigen::VectorXd c1 = random_matrix(rng, n1, 1), c2 = random_matrix(rng, n2, 1);
    const Eigen::MatrixXd e1 = random_matrix(rng, 1, n1), e2 = random_matrix(rng, 1, n2);
    const Eigen::VectorXd r1 = random_matrix(rng, 1, 1), r2 = random_matrix(rng, 1, 1);
    // Two shared coordinates: x1[0] = x2[0], x1[1] = x2[1].
    Eigen::MatrixXd a1 = Eigen::MatrixXd::Zero(2, n1), a2 = Eigen::MatrixXd::Zero(2, n2);
    a1(0, 0) = a1(1, 1) = 1;
    a2(0, 0) = a2(1, 1) = -1;
    const CouplingSystem coupling = dense_coupling({a1, a2}, Eigen::VectorXd::Zero(2));
    std::vector<LocalModel> locals{quadratic_model(0, q1, c1, e1, r1),
                                   quadratic_model(1, q2, c2, e2, r2)};

    // Direct KKT solve of the undivided problem.
    const Eigen::Index n = n1 + n2, m = 4;
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + m, n + m);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + m);
    kkt.block(0, 0, n1, n1) = q1;
    kkt.block(n1, n1, n2, n2) = q2;
    Eigen::MatrixXd cons = Eigen::MatrixXd::Zero(m, n);
    cons.block(0, 0, 1, n1) = e1;
    cons.block(1, n1, 1, n2) = e2;
    cons.block(2, 0, 2, n1) = a1;
    cons.block(2, n1, 2, n2) = a2;
    kkt.block(n, 0, m, n) = cons;
    kkt.block(0, n, n, m) = cons.transpose();
    rhs.head(n1) = -c1;
    rhs.segment(n1, n2) = -c2;
    rhs[n] = r1[0];
    rhs[n + 1] = r2[0];
    const Eigen::VectorXd direct = kkt.fullPivLu().solve(rhs);

    AladinConfig config;
    ConvergenceTrace t = run_aladin(locals, coupling,
                                    {Eigen::VectorXd::Zero(n1), Eigen::VectorXd::Zero(n2)}, config);
    ASSERT_TRUE(t.converged);
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_EQ(t.rows.back().iter, 1);
    Eigen::VectorXd x(n);
    x << t.iterates.back()[0], t.iterates.back()[1];
    EXPECT_LE((x - direct.head(n)).lpNorm<Eigen::Infinity>(), 1e-8);
  }
}

TEST(Iteration, SingleRegionMatchesCentralized) {
  Fig1 f;
  OpfResult ref = solve_centralized_opf(f.grid);
  ConvergenceTrace t = run_sequential(f.grid, single_region(f.grid), f.config);
  ASSERT_TRUE(t.converged);
  EXPECT_NEAR(t.objective, ref.objective, 1e-8 * ref.objective);
  for (const auto& row : t.rows) EXPECT_EQ(row.primal, 0.0);
}

TEST(Iteration, FigOneConvergesToCentralizedSolution) {
  Fig1 f;
  OpfResult ref = solve_centralized_opf(f.grid);
  ConvergenceTrace t = run_sequential(f.grid, load_region_map(test::data_path("case6_fig1_regions.txt")),
                                      f.config, &ref.solution.x);
  ASSERT_TRUE(t.converged);
  EXPECT_LE(t.rows.back().primal, 1e-6);
  EXPECT_LE(t.rows.back().dual, 1e-6);
  EXPECT_LE(std::abs(t.objective - ref.objective) / ref.objective, 1e-6);
  EXPECT_LE(t.rows.back().x_gap, 1e-4);
}

TEST(Iteration, MergedCaseConvergesWithinBudget) {
  NetworkCase grid = test::load_normalized("itd_case.m");
  OpfResult ref = solve_centralized_opf(grid);
  ConvergenceTrace t = run_sequential(grid, load_region_map(test::data_path("itd_regions.txt")),
                                      AladinConfig{}, &ref.solution.x);
  ASSERT_TRUE(t.converged);
  EXPECT_LE(t.rows.size(), 25u);
  EXPECT_LE(t.rows.back().primal, 1e-6);
  EXPECT_LE(t.rows.back().dual, 1e-6);
  EXPECT_LE(std::abs(t.objective - ref.objective) / ref.objective, 1e-6);
}

TEST(Iteration, RepeatedRunsAreBitwiseIdentical) {
  Fig1 f;
  const RegionAssignment a = load_region_map(test::data_path("case6_fig1_regions.txt"));
  ConvergenceTrace t1 = run_sequential(f.grid, a, f.config);
  ConvergenceTrace t2 = run_sequential(f.grid, a, f.config);
  ASSERT_EQ(t1.iterates.size(), t2.iterates.size());
  for (std::size_t k = 0; k < t1.iterates.size(); ++k) {
    for (std::size_t l = 0; l < t1.iterates[k].size(); ++l) {
      EXPECT_EQ(t1.iterates[k][l], t2.iterates[k][l]);
    }
  }
  EXPECT_EQ(trace_csv(t1), trace_csv(t2));
}

TEST(Iteration, MaxIterStopsUnconverged) {
  Fig1 f;
  f.config.max_iter = 2;
  ConvergenceTrace t = run_sequential(f.grid, load_region_map(test::data_path("case6_fig1_regions.txt")),
                                      f.config);
  EXPECT_FALSE(t.converged);
  EXPECT_EQ(t.rows.size(), 2u);
}

TEST(TraceCsv, HeaderAndRows) {
  ConvergenceTrace t;
  t.rows.push_back({0, 1.5, 0.25, 0.5, std::numeric_limits<double>::quiet_NaN()});
  t.rows.push_back({1, 2.0, 0.0, 0.125, 1e-3});
  EXPECT_EQ(trace_csv(t),
            "iter,objective,primal_res,dual_res,x_gap_to_ref\n"
            "0,1.5,0.25,0.5,\n"
            "1,2,0,0.125,0.001\n");
}

}  // namespace
}  // namespace dopf
