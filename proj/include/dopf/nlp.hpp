#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace dopf {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// min f(x) s.t. h(x) = 0, c(x) <= 0, lower <= x <= upper.
///
/// `hessian(x, w, y_eq, y_ineq)` returns the second derivatives of
/// w f + y_eq^T h + y_ineq^T c; only the lower triangle is read.
struct NlpProblem {
  std::size_t num_vars = 0;
  std::size_t num_eq = 0;
  std::size_t num_ineq = 0;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::VectorXd x0;

  std::function<double(const Eigen::VectorXd&)> objective;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> eq;
  std::function<SparseMatrix(const Eigen::VectorXd&)> eq_jacobian;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> ineq;
  std::function<SparseMatrix(const Eigen::VectorXd&)> ineq_jacobian;
  std::function<SparseMatrix(const Eigen::VectorXd&, double, const Eigen::VectorXd&,
                             const Eigen::VectorXd&)>
      hessian;

  /// Throws std::invalid_argument on inconsistent dimensions or bounds.
  void validate() const;
};

struct NlpOptions {
  double tol = 1e-8;
  int max_iter = 200;
  double mu_init = 0.1;
  double mu_linear_factor = 0.2;      // mu <- min(factor mu, mu^superlinear_power)
  double mu_superlinear_power = 1.5;
  double fraction_to_boundary = 0.995;
  double bound_push = 1e-2;
  double reg_init = 1e-8;             // first nonzero primal regularization
  double reg_growth = 10.0;
  double reg_max = 1e4;
  double constraint_reg = 1e-9;       // static dual regularization
  double max_objective_gradient = 100.0;  // objective scaled so ||grad f(x0)|| <= this
  bool verbose = false;
};

enum class NlpStatus { optimal, max_iter, infeasible_detected, numerical_failure };

std::string to_string(NlpStatus status);

struct NlpIteration {
  int iter = 0;
  double objective = 0.0;
  double mu = 0.0;
  double infeasibility = 0.0;  // theta: l1 norm of (h, c + s)
  double barrier = 0.0;        // phi: scaled barrier objective
  double kkt = 0.0;
  double primal_reg = 0.0;
  double alpha = 0.0;
  bool filter_accepted = true;
};

struct NlpSolution {
  NlpStatus status = NlpStatus::numerical_failure;
  Eigen::VectorXd x;
  Eigen::VectorXd y_eq;      // multipliers of h (kappa)
  Eigen::VectorXd y_ineq;    // multipliers of c, >= 0
  Eigen::VectorXd z_lower;   // bound multipliers, >= 0
  Eigen::VectorXd z_upper;
  double objective = 0.0;
  double kkt_residual = 0.0;  // scaled form, see kkt_residual()
  int iterations = 0;
  std::vector<NlpIteration> history;
};

/// Primal-dual interior point with a filter line search.
NlpSolution solve(const NlpProblem& problem, const NlpOptions& options = {});

struct KktMultipliers {
  Eigen::VectorXd y_eq;
  Eigen::VectorXd y_ineq;
  Eigen::VectorXd z_lower;
  Eigen::VectorXd z_upper;
};

/// max(stationarity, feasibility, complementarity), each an infinity norm.
/// Feasibility covers h, positive parts of c, and bound violations; the slack
/// of c is taken as -c. With `scaled`, stationarity and complementarity are
/// divided by 1 + ||grad f(x)||_inf, the form used for termination.
double kkt_residual(const NlpProblem& problem, const Eigen::VectorXd& x,
                    const KktMultipliers& multipliers, bool scaled = false);

}  // namespace dopf
