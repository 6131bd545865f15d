#pragma once

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

#include "dopf/acopf.hpp"
#include "dopf/aladin.hpp"
#include "dopf/partition.hpp"

namespace dopf::test {

/// Point strictly inside the variable bounds; free entries in [-0.5, 0.5].
inline Eigen::VectorXd random_interior(const OpfModel& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  VariableBounds b = variable_bounds(m);
  Eigen::VectorXd x(static_cast<Eigen::Index>(m.dim()));
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double lo = std::isfinite(b.lower[i]) ? b.lower[i] : -0.5;
    const double hi = std::isfinite(b.upper[i]) ? b.upper[i] : 0.5;
    x[i] = lo + (hi - lo) * (0.05 + 0.9 * u(rng));
  }
  return x;
}

/// Global state with angles in [-0.3, 0.3] and magnitudes in [0.9, 1.1].
inline Eigen::VectorXd random_state(const NetworkCase& grid, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(-0.3, 0.3);
  std::uniform_real_distribution<double> mag(0.9, 1.1);
  std::uniform_real_distribution<double> inj(-1.0, 1.0);
  StateLayout lo{grid.buses.size(), grid.generators.size()};
  Eigen::VectorXd x(static_cast<Eigen::Index>(lo.dim()));
  for (std::size_t i = 0; i < grid.buses.size(); ++i) {
    x[lo.theta(i)] = angle(rng);
    x[lo.v(i)] = mag(rng);
  }
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    x[lo.p(g)] = inj(rng);
    x[lo.q(g)] = inj(rng);
  }
  return x;
}

// f = 1/2 x^T Q x + c^T x, h = E x - e, optional box.
inline LocalModel quadratic_model(int id, const Eigen::MatrixXd& q, const Eigen::VectorXd& c,
                                  const Eigen::MatrixXd& e_mat, const Eigen::VectorXd& e_rhs) {
  const auto n = q.rows();
  LocalModel m;
  m.region_id = id;
  m.sigma = Eigen::VectorXd::Ones(n);
  NlpProblem& p = m.problem;
  p.num_vars = static_cast<std::size_t>(n);
  p.num_eq = static_cast<std::size_t>(e_mat.rows());
  p.lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
  p.upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  p.x0 = Eigen::VectorXd::Zero(n);
  p.objective = [q, c](const Eigen::VectorXd& x) { return 0.5 * x.dot(q * x) + c.dot(x); };
  p.gradient = [q, c](const Eigen::VectorXd& x) -> Eigen::VectorXd { return q * x + c; };
  p.eq = [e_mat, e_rhs](const Eigen::VectorXd& x) -> Eigen::VectorXd { return e_mat * x - e_rhs; };
  const SparseMatrix js = e_mat.sparseView();
  p.eq_jacobian = [js](const Eigen::VectorXd&) { return js; };
  p.ineq = [](const Eigen::VectorXd&) { return Eigen::VectorXd(); };
  p.ineq_jacobian = [n](const Eigen::VectorXd&) { return SparseMatrix(0, n); };
  const SparseMatrix qs = q.sparseView();
  p.hessian = [qs](const Eigen::VectorXd&, double w, const Eigen::VectorXd&,
                   const Eigen::VectorXd&) -> SparseMatrix { return w * qs; };
  return m;
}

inline CouplingSystem dense_coupling(const std::vector<Eigen::MatrixXd>& a,
                                     const Eigen::VectorXd& b) {
  CouplingSystem c;
  for (const auto& m : a) {
    c.A.push_back(m.sparseView());
    c.dims.push_back(static_cast<std::size_t>(m.cols()));
  }
  c.b = b;
  c.rows_info.resize(static_cast<std::size_t>(b.size()));
  return c;
}

inline Eigen::MatrixXd random_spd(std::mt19937& rng, Eigen::Index n) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m.transpose() * m + Eigen::MatrixXd::Identity(n, n);
}

inline Eigen::MatrixXd random_matrix(std::mt19937& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

}  // namespace dopf::test
