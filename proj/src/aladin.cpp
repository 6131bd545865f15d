#include "dopf/aladin.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <fmt/format.h>

#include "dopf/acopf.hpp"
#include "dopf/opf.hpp"

namespace dopf {

AladinError::AladinError(int region_id, NlpStatus status, const std::string& what)
    : std::runtime_error(what), region_id_(region_id), status_(status) {}

std::string to_string(Regularization mode) {
  switch (mode) {
    case Regularization::shift: return "shift";
    case Regularization::clip: return "clip";
    case Regularization::null_space: return "null_space";
  }
  return "unknown";
}

Regularization regularization_from_string(const std::string& name) {
  if (name == "shift") return Regularization::shift;
  if (name == "clip") return Regularization::clip;
  if (name == "null_space") return Regularization::null_space;
  throw std::invalid_argument("unknown regularization '" + name + "'");
}

void AladinConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  };
  require(rho0 > 0.0, "rho0 must be positive");
  require(rho_growth >= 1.0, "rho growth must be >= 1");
  require(rho_max >= rho0, "rho_max must be >= rho0");
  require(sigma_voltage > 0.0 && sigma_power > 0.0, "Sigma weights must be positive");
  require(eps > 0.0, "eps must be positive");
  require(max_iter > 0, "max_iter must be positive");
  require(reg_delta > 0.0, "regularization delta must be positive");
  require(mu > 0.0, "mu must be positive");
}

Eigen::VectorXd region_flat_start(const RegionModel& region) {
  return flat_start(OpfModel(region.grid, region.num_core, std::nullopt));
}

LocalModel make_local_model(const RegionModel& region, const AladinConfig& config) {
  auto model = std::make_shared<const OpfModel>(region.grid, region.num_core, std::nullopt);
  LocalModel local;
  local.region_id = region.region_id;
  local.problem = make_opf_problem(model);
  const StateLayout layout = model->layout();
  local.sigma.resize(static_cast<Eigen::Index>(layout.dim()));
  for (std::size_t i = 0; i < layout.num_buses; ++i) {
    local.sigma[layout.theta(i)] = config.sigma_voltage;
    local.sigma[layout.v(i)] = config.sigma_voltage;
  }
  for (std::size_t g = 0; g < layout.num_generators; ++g) {
    local.sigma[layout.p(g)] = config.sigma_power;
    local.sigma[layout.q(g)] = config.sigma_power;
  }
  return local;
}

namespace {

SparseMatrix diagonal_matrix(const Eigen::VectorXd& d) {
  SparseMatrix m(d.size(), d.size());
  m.reserve(Eigen::VectorXi::Constant(d.size(), 1));
  for (Eigen::Index i = 0; i < d.size(); ++i) m.insert(i, i) = d[i];
  m.makeCompressed();
  return m;
}

}  // namespace

LocalSolution local_step(const LocalModel& local, const Eigen::VectorXd& z,
                         const SparseMatrix& coupling_block, const Eigen::VectorXd& lambda,
                         double rho, const NlpOptions& options) {
  const NlpProblem& base = local.problem;
  if (z.size() != static_cast<Eigen::Index>(base.num_vars) ||
      coupling_block.cols() != z.size() || coupling_block.rows() != lambda.size()) {
    throw std::invalid_argument("local step dimension mismatch");
  }
  const Eigen::VectorXd linear = coupling_block.transpose() * lambda;
  const Eigen::VectorXd weights = rho * local.sigma;

  NlpProblem p = base;
  p.x0 = z;
  p.objective = [&base, linear, weights, z](const Eigen::VectorXd& x) {
    const Eigen::VectorXd d = x - z;
    return base.objective(x) + linear.dot(x) + 0.5 * d.dot(weights.cwiseProduct(d));
  };
  p.gradient = [&base, linear, weights, z](const Eigen::VectorXd& x) {
    Eigen::VectorXd g = base.gradient(x) + linear;
    g += weights.cwiseProduct(x - z);
    return g;
  };
  p.hessian = [&base, weights](const Eigen::VectorXd& x, double w, const Eigen::VectorXd& ye,
                               const Eigen::VectorXd& yi) {
    SparseMatrix h = base.hessian(x, w, ye, yi);
    h += diagonal_matrix(w * weights);
    return h;
  };

  NlpSolution sol = solve(p, options);
  if (sol.status != NlpStatus::optimal) {
    throw AladinError(local.region_id, sol.status,
                      fmt::format("local NLP of region {} failed: {}", local.region_id,
                                  to_string(sol.status)));
  }
  LocalSolution out;
  out.x = std::move(sol.x);
  out.kappa = std::move(sol.y_eq);
  out.objective = base.objective(out.x);
  out.iterations = sol.iterations;
  return out;
}

double smallest_eigenvalue(const SparseMatrix& h) {
  if (h.rows() == 0) return 0.0;
  const Eigen::MatrixXd dense(h);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense, Eigen::EigenvaluesOnly);
  return eig.eigenvalues()[0];
}

namespace {

Eigen::MatrixXd clip_eigenvalues(const Eigen::MatrixXd& m, double delta) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(delta);
  const Eigen::MatrixXd& v = eig.eigenvectors();
  Eigen::MatrixXd out = v * lam.asDiagonal() * v.transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace

SparseMatrix regularize_hessian(const SparseMatrix& h, double delta, Regularization mode,
                                const SparseMatrix* jacobian) {
  if (h.rows() != h.cols()) throw std::invalid_argument("Hessian must be square");
  if (h.rows() == 0) return h;
  const Eigen::MatrixXd dense(h);
  if (mode != Regularization::shift && smallest_eigenvalue(h) >= delta) return h;
  if (mode == Regularization::null_space) {
    if (!jacobian || jacobian->cols() != h.cols()) {
      throw std::invalid_argument("null-space regularization needs the constraint Jacobian");
    }
    const Eigen::MatrixXd jt = Eigen::MatrixXd(*jacobian).transpose();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(jt);
    const Eigen::Index n = h.rows();
    const Eigen::Index r = qr.rank();
    const Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd z = q.rightCols(n - r);
    const Eigen::MatrixXd y = q.leftCols(r);
    const Eigen::MatrixXd reduced = clip_eigenvalues(z.transpose() * dense * z, delta);
    const double range_curvature = std::max(delta, dense.diagonal().cwiseAbs().maxCoeff());
    Eigen::MatrixXd out = z * reduced * z.transpose() + range_curvature * (y * y.transpose());
    out = 0.5 * (out + out.transpose()).eval();
    return out.sparseView();
  }
  if (mode == Regularization::shift) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense, Eigen::EigenvaluesOnly);
    const double sigma = std::max(0.0, delta - eig.eigenvalues()[0]);
    SparseMatrix out = h;
    if (sigma > 0.0) out += diagonal_matrix(Eigen::VectorXd::Constant(h.rows(), sigma));
    return out;
  }
  return clip_eigenvalues(dense, delta).sparseView();
}

SensitivityPacket sensitivities(const LocalModel& local, const LocalSolution& solution,
                                const AladinConfig& config) {
  const NlpProblem& p = local.problem;
  const Eigen::VectorXd& x = solution.x;
  SensitivityPacket packet;
  packet.region_id = local.region_id;
  packet.x = x;
  packet.gradient = p.gradient(x);
  packet.jacobian = p.eq_jacobian(x);
  const SparseMatrix h =
      p.hessian(x, 1.0, solution.kappa, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.num_ineq)));
  packet.hessian = regularize_hessian(h, config.reg_delta, config.regularization, &packet.jacobian);
  packet.delta_lower = p.lower - x;
  packet.delta_upper = p.upper - x;
  return packet;
}

CoordinationResult coordination_step(const std::vector<SensitivityPacket>& packets,
                                     const CouplingSystem& coupling, const NlpOptions& options) {
  const std::size_t regions = packets.size();
  if (regions != coupling.num_regions()) {
    throw std::invalid_argument("one sensitivity packet per region required");
  }
  std::vector<Eigen::Index> offset(regions + 1, 0);
  Eigen::Index num_eq = static_cast<Eigen::Index>(coupling.rows());
  for (std::size_t l = 0; l < regions; ++l) {
    const auto n = packets[l].x.size();
    if (n != static_cast<Eigen::Index>(coupling.dims[l]) || packets[l].hessian.rows() != n ||
        packets[l].jacobian.cols() != n) {
      throw std::invalid_argument(fmt::format("packet {} has inconsistent dimensions", l));
    }
    offset[l + 1] = offset[l] + n;
    num_eq += packets[l].jacobian.rows();
  }
  const Eigen::Index n = offset[regions];
  const Eigen::Index m_c = static_cast<Eigen::Index>(coupling.rows());

  std::vector<Eigen::VectorXd> xs;
  xs.reserve(regions);
  for (const auto& pk : packets) xs.push_back(pk.x);
  const Eigen::VectorXd rhs = coupling.residual(xs);

  std::vector<Eigen::Triplet<double>> ht, jt;
  Eigen::VectorXd g(n), lower(n), upper(n);
  Eigen::Index row = m_c;
  for (std::size_t l = 0; l < regions; ++l) {
    const auto& pk = packets[l];
    const Eigen::Index o = offset[l];
    g.segment(o, pk.x.size()) = pk.gradient;
    lower.segment(o, pk.x.size()) = pk.delta_lower;
    upper.segment(o, pk.x.size()) = pk.delta_upper;
    for (int k = 0; k < pk.hessian.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(pk.hessian, k); it; ++it) {
        ht.emplace_back(o + it.row(), o + it.col(), it.value());
      }
    }
    const SparseMatrix& a = coupling.A[l];
    for (int k = 0; k < a.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(a, k); it; ++it) {
        jt.emplace_back(it.row(), o + it.col(), it.value());
      }
    }
    for (int k = 0; k < pk.jacobian.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(pk.jacobian, k); it; ++it) {
        jt.emplace_back(row + it.row(), o + it.col(), it.value());
      }
    }
    row += pk.jacobian.rows();
  }
  SparseMatrix h(n, n), jac(num_eq, n);
  h.setFromTriplets(ht.begin(), ht.end());
  jac.setFromTriplets(jt.begin(), jt.end());

  NlpProblem qp;
  qp.num_vars = static_cast<std::size_t>(n);
  qp.num_eq = static_cast<std::size_t>(num_eq);
  qp.num_ineq = 0;
  qp.lower = lower;
  qp.upper = upper;
  qp.x0 = Eigen::VectorXd::Zero(n);
  qp.objective = [&h, &g](const Eigen::VectorXd& d) { return 0.5 * d.dot(h * d) + g.dot(d); };
  qp.gradient = [&h, &g](const Eigen::VectorXd& d) -> Eigen::VectorXd { return h * d + g; };
  qp.eq = [&jac, &rhs, m_c](const Eigen::VectorXd& d) -> Eigen::VectorXd {
    Eigen::VectorXd r = jac * d;
    r.head(m_c) += rhs;
    return r;
  };
  qp.eq_jacobian = [&jac](const Eigen::VectorXd&) { return jac; };
  qp.ineq = [](const Eigen::VectorXd&) { return Eigen::VectorXd(); };
  qp.ineq_jacobian = [n](const Eigen::VectorXd&) { return SparseMatrix(0, n); };
  qp.hessian = [&h](const Eigen::VectorXd&, double w, const Eigen::VectorXd&,
                    const Eigen::VectorXd&) -> SparseMatrix { return w * h; };

  NlpSolution sol = solve(qp, options);
  if (sol.status != NlpStatus::optimal) {
    throw AladinError(-1, sol.status,
                      fmt::format("coordination QP failed: {}", to_string(sol.status)));
  }
  CoordinationResult out;
  out.delta.reserve(regions);
  for (std::size_t l = 0; l < regions; ++l) {
    out.delta.push_back(sol.x.segment(offset[l], offset[l + 1] - offset[l]));
  }
  out.lambda = sol.y_eq.head(m_c);
  out.iterations = sol.iterations;
  return out;
}

Residuals residuals(const std::vector<Eigen::VectorXd>& x, const std::vector<Eigen::VectorXd>& z,
                    const CouplingSystem& coupling) {
  if (x.size() != z.size()) throw std::invalid_argument("residuals: x and z differ in length");
  Residuals r;
  const Eigen::VectorXd c = coupling.residual(x);
  r.primal = c.size() ? c.cwiseAbs().maxCoeff() : 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    if (x[l].size() != z[l].size()) throw std::invalid_argument("residuals: dimension mismatch");
    if (x[l].size()) r.dual = std::max(r.dual, (x[l] - z[l]).cwiseAbs().maxCoeff());
  }
  return r;
}

AladinState initial_state(std::vector<Eigen::VectorXd> z0, std::size_t num_consensus,
                          const AladinConfig& config) {
  AladinState s;
  s.z = std::move(z0);
  s.x = s.z;
  s.lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_consensus));
  s.rho = config.rho0;
  return s;
}

void update(AladinState& state, const CoordinationResult& step, const AladinConfig& config) {
  if (step.delta.size() != state.x.size()) throw std::invalid_argument("update: region count");
  for (std::size_t l = 0; l < state.x.size(); ++l) state.z[l] = state.x[l] + step.delta[l];
  state.lambda = step.lambda;
  state.rho = std::min(state.rho * config.rho_growth, config.rho_max);
  ++state.iteration;
}

ConvergenceTrace run_aladin(const std::vector<LocalModel>& locals, const CouplingSystem& coupling,
                            std::vector<Eigen::VectorXd> z0, const AladinConfig& config,
                            const GapFunction& gap) {
  config.validate();
  if (locals.size() != coupling.num_regions() || z0.size() != locals.size()) {
    throw std::invalid_argument("run_aladin: region count mismatch");
  }
  AladinState state = initial_state(std::move(z0), coupling.rows(), config);
  ConvergenceTrace trace;
  for (;;) {
    std::vector<LocalSolution> sols;
    sols.reserve(locals.size());
    TraceRow row;
    row.iter = state.iteration;
    for (std::size_t l = 0; l < locals.size(); ++l) {
      sols.push_back(local_step(locals[l], state.z[l], coupling.A[l], state.lambda, state.rho,
                                config.local_nlp));
      state.x[l] = sols.back().x;
      row.objective += sols.back().objective;
    }
    const Residuals r = residuals(state.x, state.z, coupling);
    row.primal = r.primal;
    row.dual = r.dual;
    if (gap) row.x_gap = gap(state.x);
    trace.rows.push_back(row);
    trace.iterates.push_back(state.x);
    trace.objective = row.objective;
    if (r.primal <= config.eps && r.dual <= config.eps) {
      trace.converged = true;
      break;
    }
    if (state.iteration + 1 >= config.max_iter) break;

    std::vector<SensitivityPacket> packets;
    packets.reserve(locals.size());
    for (std::size_t l = 0; l < locals.size(); ++l) {
      packets.push_back(sensitivities(locals[l], sols[l], config));
    }
    update(state, coordination_step(packets, coupling, config.qp), config);
  }
  return trace;
}

double state_gap(const std::vector<RegionModel>& regions, const CouplingSystem& coupling,
                 const NetworkCase& grid, const std::vector<Eigen::VectorXd>& xs,
                 const Eigen::VectorXd& reference) {
  const StateLayout layout{grid.buses.size(), grid.generators.size()};
  if (reference.size() != static_cast<Eigen::Index>(layout.dim())) {
    throw std::invalid_argument("reference state has the wrong dimension");
  }
  Eigen::VectorXd x =
      gather(regions, coupling, xs, grid.buses.size(), grid.generators.size()).x;
  Eigen::VectorXd ref = reference;
  const std::size_t r = grid.reference_index();
  const double shift = x[layout.theta(r)];
  const double ref_shift = ref[layout.theta(r)];
  for (std::size_t i = 0; i < layout.num_buses; ++i) {
    x[layout.theta(i)] -= shift;
    ref[layout.theta(i)] -= ref_shift;
  }
  return (x - ref).cwiseAbs().maxCoeff();
}

ConvergenceTrace run_sequential(const NetworkCase& grid, const RegionAssignment& assignment,
                                const AladinConfig& config, const Eigen::VectorXd* reference) {
  const std::vector<RegionModel> regions = decompose(grid, assignment);
  const CouplingSystem coupling = build_consensus(regions);
  std::vector<LocalModel> locals;
  std::vector<Eigen::VectorXd> z0;
  for (const auto& region : regions) {
    locals.push_back(make_local_model(region, config));
    z0.push_back(region_flat_start(region));
  }
  GapFunction gap;
  if (reference) {
    gap = [&](const std::vector<Eigen::VectorXd>& xs) {
      return state_gap(regions, coupling, grid, xs, *reference);
    };
  }
  return run_aladin(locals, coupling, std::move(z0), config, gap);
}

std::string trace_csv(const ConvergenceTrace& trace) {
  std::string out = "iter,objective,primal_res,dual_res,x_gap_to_ref\n";
  for (const auto& row : trace.rows) {
    out += fmt::format("{},{},{},{},", row.iter, row.objective, row.primal,
                       row.dual);
    if (!std::isnan(row.x_gap)) out += fmt::format("{}", row.x_gap);
    out += '\n';
  }
  return out;
}

}  // namespace dopf
