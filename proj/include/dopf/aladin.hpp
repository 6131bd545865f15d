#pragma once

#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "dopf/nlp.hpp"
#include "dopf/partition.hpp"

namespace dopf {

/// Local NLP or coordination QP failure; region_id is -1 for the coordinator.
class AladinError : public std::runtime_error {
 public:
  AladinError(int region_id, NlpStatus status, const std::string& what);

  int region_id() const noexcept { return region_id_; }
  NlpStatus status() const noexcept { return status_; }

 private:
  int region_id_;
  NlpStatus status_;
};

enum class Regularization {
  shift,  // H + sigma I with sigma = max(0, delta - lambda_min(H))
  clip,   // eigenvalues below delta raised to delta
  null_space,  // clip on the null space of J, fixed curvature on its range
};

std::string to_string(Regularization mode);
Regularization regularization_from_string(const std::string& name);

struct AladinConfig {
  double rho0 = 100.0;
  double rho_growth = 2.0;
  double rho_max = 1e6;
  double sigma_voltage = 100.0;  // Sigma weight on theta and v entries
  double sigma_power = 1.0;      // Sigma weight on p_g and q_g entries
  double eps = 1e-6;
  int max_iter = 50;
  double mu = 1.0;  // reserved, not used by the iteration
  double reg_delta = 1e-6;
  Regularization regularization = Regularization::null_space;
  NlpOptions local_nlp = with_tolerance(1e-11);
  NlpOptions qp = with_tolerance(1e-10);

  static NlpOptions with_tolerance(double tol) {
    NlpOptions o;
    o.tol = tol;
    return o;
  }

  /// Throws std::invalid_argument when a parameter is out of range.
  void validate() const;
};

/// One region's decoupled problem. `problem.hessian(x, w, kappa, mu)` must
/// return the curvature of w f + kappa^T h + mu^T c; x0 is ignored.
struct LocalModel {
  int region_id = 0;
  NlpProblem problem;
  Eigen::VectorXd sigma;  // diagonal of Sigma
};

/// Local model of an OPF region: cost, core-bus balance, squared flow limits,
/// bounds; no angle is fixed.
LocalModel make_local_model(const RegionModel& region, const AladinConfig& config);

/// Flat start of a region (theta = 0, v = 1, clipped setpoints).
Eigen::VectorXd region_flat_start(const RegionModel& region);

struct LocalSolution {
  Eigen::VectorXd x;
  Eigen::VectorXd kappa;  // equality multipliers
  double objective = 0.0; // f alone, without coupling or proximal terms
  int iterations = 0;
};

/// min f + lambda^T A x + rho/2 ||x - z||^2_Sigma s.t. local constraints,
/// started from z. Throws AladinError unless the solve is optimal.
LocalSolution local_step(const LocalModel& local, const Eigen::VectorXd& z,
                         const SparseMatrix& coupling_block, const Eigen::VectorXd& lambda,
                         double rho, const NlpOptions& options = {});

struct SensitivityPacket {
  int region_id = 0;
  Eigen::VectorXd x;
  Eigen::VectorXd gradient;
  SparseMatrix jacobian;
  SparseMatrix hessian;  // regularized
  Eigen::VectorXd delta_lower;
  Eigen::VectorXd delta_upper;
};

SensitivityPacket sensitivities(const LocalModel& local, const LocalSolution& solution,
                                const AladinConfig& config);

/// Smallest eigenvalue of a symmetric matrix (dense symmetric eigensolver).
double smallest_eigenvalue(const SparseMatrix& h);

/// Positive definite modification with smallest eigenvalue >= delta.
/// `jacobian` is required by the null-space mode and ignored otherwise.
SparseMatrix regularize_hessian(const SparseMatrix& h, double delta = 1e-6,
                                Regularization mode = Regularization::shift,
                                const SparseMatrix* jacobian = nullptr);

struct CoordinationResult {
  std::vector<Eigen::VectorXd> delta;
  Eigen::VectorXd lambda;
  int iterations = 0;
};

/// Coupled QP over the steps delta_l. Throws AladinError (region -1) unless
/// the QP solve is optimal.
CoordinationResult coordination_step(const std::vector<SensitivityPacket>& packets,
                                     const CouplingSystem& coupling,
                                     const NlpOptions& options = {});

struct Residuals {
  double primal = 0.0;  // ||sum A x - b||_inf
  double dual = 0.0;    // max_l ||x_l - z_l||_inf
};

Residuals residuals(const std::vector<Eigen::VectorXd>& x, const std::vector<Eigen::VectorXd>& z,
                    const CouplingSystem& coupling);

struct AladinState {
  std::vector<Eigen::VectorXd> z;
  std::vector<Eigen::VectorXd> x;
  Eigen::VectorXd lambda;
  double rho = 0.0;
  int iteration = 0;  // completed updates
};

AladinState initial_state(std::vector<Eigen::VectorXd> z0, std::size_t num_consensus,
                          const AladinConfig& config);

/// z <- x + delta, lambda <- lambda_QP, rho <- min(rho r, rho_max).
void update(AladinState& state, const CoordinationResult& step, const AladinConfig& config);

struct TraceRow {
  int iter = 0;
  double objective = 0.0;
  double primal = 0.0;
  double dual = 0.0;
  double x_gap = std::numeric_limits<double>::quiet_NaN();
};

struct ConvergenceTrace {
  std::vector<TraceRow> rows;
  std::vector<std::vector<Eigen::VectorXd>> iterates;  // local solutions per row
  bool converged = false;
  double objective = 0.0;
};

/// Distance of the local solutions to a reference, for the trace.
using GapFunction = std::function<double(const std::vector<Eigen::VectorXd>&)>;

/// Algorithm loop on prepared local models. A row is recorded after every
/// round of local solves; the run stops when both residuals are <= eps.
ConvergenceTrace run_aladin(const std::vector<LocalModel>& locals, const CouplingSystem& coupling,
                            std::vector<Eigen::VectorXd> z0, const AladinConfig& config,
                            const GapFunction& gap = {});

/// Decompose, flat start, iterate. `reference` is a global solution of the
/// whole case (angles relative to the reference bus) used for x_gap.
ConvergenceTrace run_sequential(const NetworkCase& grid, const RegionAssignment& assignment,
                                const AladinConfig& config,
                                const Eigen::VectorXd* reference = nullptr);

/// ||gather(x) - reference||_inf after shifting angles so the reference bus
/// angle is zero.
double state_gap(const std::vector<RegionModel>& regions, const CouplingSystem& coupling,
                 const NetworkCase& grid, const std::vector<Eigen::VectorXd>& xs,
                 const Eigen::VectorXd& reference);

/// CSV with header iter,objective,primal_res,dual_res,x_gap_to_ref.
std::string trace_csv(const ConvergenceTrace& trace);

}  // namespace dopf
