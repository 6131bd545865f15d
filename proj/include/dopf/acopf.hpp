#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "dopf/case_model.hpp"
#include "dopf/state_layout.hpp"

namespace dopf {

using RowSparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// AC OPF evaluation model over a normalized network.
///
/// Balance rows exist for the first `num_balance_buses` buses only (all buses
/// for a centralized model, core buses for a region). Rows are ordered active
/// power for each balance bus, then reactive power.
class OpfModel {
 public:
  OpfModel(NetworkCase grid, std::size_t num_balance_buses,
           std::optional<std::size_t> fixed_angle_bus);

  /// Whole-network model with the reference bus angle fixed to zero.
  static OpfModel centralized(const NetworkCase& grid);

  const NetworkCase& grid() const { return grid_; }
  const StateLayout& layout() const { return layout_; }
  std::size_t dim() const { return layout_.dim(); }
  std::size_t num_balance_buses() const { return num_balance_buses_; }
  std::size_t num_balance_rows() const { return 2 * num_balance_buses_; }
  std::optional<std::size_t> fixed_angle_bus() const { return fixed_angle_; }
  const RowSparseMatrix& G() const { return g_; }
  const RowSparseMatrix& B() const { return b_; }

  /// Branches with a finite flow limit; each contributes two rows (from end,
  /// to end) to the flow-limit constraint.
  const std::vector<std::size_t>& limited_branches() const { return limited_; }
  std::size_t num_flow_rows() const { return 2 * limited_.size(); }

 private:
  NetworkCase grid_;
  StateLayout layout_;
  std::size_t num_balance_buses_;
  std::optional<std::size_t> fixed_angle_;
  RowSparseMatrix g_;
  RowSparseMatrix b_;
  std::vector<std::size_t> limited_;
};

struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

/// Generation cost in physical units, evaluated with p_g converted to MW.
ObjectiveValue objective(const OpfModel& model, const Eigen::VectorXd& x);

/// Diagonal cost curvature on the p_g entries (constant).
Eigen::VectorXd objective_hessian_diagonal(const OpfModel& model);

Eigen::VectorXd balance_residual(const OpfModel& model, const Eigen::VectorXd& x);
SparseMatrix balance_jacobian(const OpfModel& model, const Eigen::VectorXd& x);

struct BranchFlow {
  double p = 0.0;
  double q = 0.0;
  double s = 0.0;  // sqrt(p^2 + q^2)
};

struct FlowReport {
  std::vector<BranchFlow> from_end;  // one per branch of the model
  std::vector<BranchFlow> to_end;
};

FlowReport line_flows(const OpfModel& model, const Eigen::VectorXd& x);

/// c(x) <= 0 with rows p^2 + q^2 - s_max^2 for the from and to end of every
/// limited branch.
Eigen::VectorXd flow_limit_residual(const OpfModel& model, const Eigen::VectorXd& x);
SparseMatrix flow_limit_jacobian(const OpfModel& model, const Eigen::VectorXd& x);

/// Second derivatives of cost_weight * f + kappa^T h + mu^T c, full symmetric
/// storage. `mu` may be empty when the model has no limited branches or the
/// flow terms are not wanted.
SparseMatrix lagrangian_hessian(const OpfModel& model, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& kappa, const Eigen::VectorXd& mu = {},
                                double cost_weight = 1.0);

struct VariableBounds {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

/// Angles free (except a fixed reference), v in [v_min, v_max], generator
/// limits on p_g, q_g.
VariableBounds variable_bounds(const OpfModel& model);

/// theta = 0, v = 1, generator setpoints clipped into their limits.
Eigen::VectorXd flat_start(const OpfModel& model);

}  // namespace dopf
