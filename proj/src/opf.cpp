#include "dopf/opf.hpp"

namespace dopf {

NlpProblem make_opf_problem(std::shared_ptr<const OpfModel> model) {
  NlpProblem p;
  p.num_vars = model->dim();
  p.num_eq = model->num_balance_rows();
  p.num_ineq = model->num_flow_rows();
  VariableBounds bounds = variable_bounds(*model);
  p.lower = std::move(bounds.lower);
  p.upper = std::move(bounds.upper);
  p.x0 = flat_start(*model);
  p.objective = [model](const Eigen::VectorXd& x) { return objective(*model, x).value; };
  p.gradient = [model](const Eigen::VectorXd& x) { return objective(*model, x).gradient; };
  p.eq = [model](const Eigen::VectorXd& x) { return balance_residual(*model, x); };
  p.eq_jacobian = [model](const Eigen::VectorXd& x) { return balance_jacobian(*model, x); };
  p.ineq = [model](const Eigen::VectorXd& x) { return flow_limit_residual(*model, x); };
  p.ineq_jacobian = [model](const Eigen::VectorXd& x) { return flow_limit_jacobian(*model, x); };
  p.hessian = [model](const Eigen::VectorXd& x, double w, const Eigen::VectorXd& y_eq,
                      const Eigen::VectorXd& y_ineq) {
    return lagrangian_hessian(*model, x, y_eq, y_ineq, w);
  };
  return p;
}

OpfResult solve_centralized_opf(const NetworkCase& grid, const NlpOptions& options) {
  auto model = std::make_shared<const OpfModel>(OpfModel::centralized(grid));
  OpfResult result;
  result.solution = solve(make_opf_problem(model), options);
  result.objective = objective(*model, result.solution.x).value;
  result.flows = line_flows(*model, result.solution.x);
  return result;
}

}  // namespace dopf
