#include "dopf/acopf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>

#include <fmt/format.h>

namespace dopf {

namespace {

using Triplets = std::vector<Eigen::Triplet<double>>;

void check_dim(const OpfModel& model, const Eigen::VectorXd& x, const char* what) {
  if (static_cast<std::size_t>(x.size()) != model.dim()) {
    throw std::invalid_argument(
        fmt::format("{}: state has dimension {}, expected {}", what, x.size(), model.dim()));
  }
}

// t = c v_i^2 + v_i v_k (alpha cos phi + beta sin phi), phi = theta_i - theta_k,
// with derivatives over (theta_i, theta_k, v_i, v_k).
struct Term {
  double value = 0.0;
  std::array<double, 4> grad{};
  std::array<std::array<double, 4>, 4> hess{};
};

Term eval_term(double c, double alpha, double beta, double theta_i, double theta_k, double v_i,
               double v_k) {
  const double phi = theta_i - theta_k;
  const double cs = std::cos(phi);
  const double sn = std::sin(phi);
  const double s = alpha * cs + beta * sn;
  const double s1 = -alpha * sn + beta * cs;
  const double s2 = -s;
  const double vv = v_i * v_k;

  Term t;
  t.value = c * v_i * v_i + vv * s;
  t.grad = {vv * s1, -vv * s1, 2.0 * c * v_i + v_k * s, v_i * s};
  auto& h = t.hess;
  h[0][0] = vv * s2;
  h[0][1] = -vv * s2;
  h[1][1] = vv * s2;
  h[0][2] = v_k * s1;
  h[0][3] = v_i * s1;
  h[1][2] = -v_k * s1;
  h[1][3] = -v_i * s1;
  h[2][2] = 2.0 * c;
  h[2][3] = s;
  h[3][3] = 0.0;
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < a; ++b) {
      h[a][b] = h[b][a];
    }
  }
  return t;
}

struct EndAdmittance {
  double g_self, b_self, g_mutual, b_mutual;
};

// Pi-model entries seen from each end of a branch.
std::pair<EndAdmittance, EndAdmittance> branch_admittance(const Branch& br) {
  using Complex = std::complex<double>;
  const Complex ys = 1.0 / Complex(br.series_r, br.series_x);
  const Complex tap = std::polar(br.tap_ratio, br.phase_shift);
  const Complex ytt = ys + Complex(0.0, br.charging_b / 2.0);
  const Complex yff = ytt / std::norm(tap);
  const Complex yft = -ys / std::conj(tap);
  const Complex ytf = -ys / tap;
  return {{yff.real(), yff.imag(), yft.real(), yft.imag()},
          {ytt.real(), ytt.imag(), ytf.real(), ytf.imag()}};
}

// Active and reactive flow terms at one end (i = near end, k = far end).
std::pair<Term, Term> end_flow(const EndAdmittance& y, double theta_i, double theta_k,
                               double v_i, double v_k) {
  return {eval_term(y.g_self, y.g_mutual, y.b_mutual, theta_i, theta_k, v_i, v_k),
          eval_term(-y.b_self, -y.b_mutual, y.g_mutual, theta_i, theta_k, v_i, v_k)};
}

SparseMatrix from_triplets(std::size_t rows, std::size_t cols, const Triplets& entries) {
  SparseMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  m.setFromTriplets(entries.begin(), entries.end());
  return m;
}

void add_hessian(Triplets& out, const std::array<std::size_t, 4>& idx,
                 const std::array<std::array<double, 4>, 4>& h, double weight) {
  for (int a = 0; a < 4; ++a) {
    for (int b = 0; b < 4; ++b) {
      if (h[a][b] != 0.0) {
        out.emplace_back(static_cast<int>(idx[a]), static_cast<int>(idx[b]), weight * h[a][b]);
      }
    }
  }
}

// Calls fn(i, k, G_ik, B_ik) for every stored off-diagonal entry of balance row i.
template <typename Fn>
void for_each_neighbor(const OpfModel& model, std::size_t i, Fn&& fn) {
  RowSparseMatrix::InnerIterator g(model.G(), static_cast<Eigen::Index>(i));
  RowSparseMatrix::InnerIterator b(model.B(), static_cast<Eigen::Index>(i));
  for (; g; ++g, ++b) {
    const auto k = static_cast<std::size_t>(g.col());
    if (k != i) {
      fn(k, g.value(), b.value());
    }
  }
}

}  // namespace

OpfModel::OpfModel(NetworkCase grid, std::size_t num_balance_buses,
                   std::optional<std::size_t> fixed_angle_bus)
    : grid_(std::move(grid)),
      layout_{grid_.buses.size(), grid_.generators.size()},
      num_balance_buses_(num_balance_buses),
      fixed_angle_(fixed_angle_bus) {
  if (!grid_.per_unit) {
    throw std::invalid_argument("OpfModel requires a normalized case");
  }
  if (num_balance_buses_ > grid_.buses.size()) {
    throw std::invalid_argument("OpfModel: more balance buses than buses");
  }
  if (fixed_angle_ && *fixed_angle_ >= grid_.buses.size()) {
    throw std::invalid_argument("OpfModel: fixed angle bus out of range");
  }
  AdmittanceMatrix y = build_admittance(grid_);
  // Same triplet set for G and B, so both share one sparsity pattern.
  g_ = y.G;
  b_ = y.B;
  for (std::size_t k = 0; k < grid_.branches.size(); ++k) {
    if (grid_.branches[k].s_max > 0.0) {
      limited_.push_back(k);
    }
  }
}

OpfModel OpfModel::centralized(const NetworkCase& grid) {
  return OpfModel(grid, grid.buses.size(), grid.reference_index());
}

ObjectiveValue objective(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "objective");
  const auto& grid = model.grid();
  const StateLayout& lo = model.layout();
  ObjectiveValue out;
  out.gradient = Eigen::VectorXd::Zero(x.size());
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    const auto& c = grid.costs[g];
    const double p_mw = x[lo.p(g)] * grid.base_power;
    out.value += evaluate_cost(c, p_mw);
    out.gradient[lo.p(g)] = (2.0 * c.a2 * p_mw + c.a1) * grid.base_power;
  }
  return out;
}

Eigen::VectorXd objective_hessian_diagonal(const OpfModel& model) {
  const auto& grid = model.grid();
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.dim()));
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    d[model.layout().p(g)] = 2.0 * grid.costs[g].a2 * grid.base_power * grid.base_power;
  }
  return d;
}

Eigen::VectorXd balance_residual(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "balance_residual");
  const auto& grid = model.grid();
  const StateLayout& lo = model.layout();
  const std::size_t nb = model.num_balance_buses();
  Eigen::VectorXd h = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * nb));
  for (std::size_t i = 0; i < nb; ++i) {
    const double vi = x[lo.v(i)];
    const double ti = x[lo.theta(i)];
    double p = vi * vi * model.G().coeff(i, i);
    double q = -vi * vi * model.B().coeff(i, i);
    for_each_neighbor(model, i, [&](std::size_t k, double gik, double bik) {
      const double phi = ti - x[lo.theta(k)];
      const double vv = vi * x[lo.v(k)];
      p += vv * (gik * std::cos(phi) + bik * std::sin(phi));
      q += vv * (gik * std::sin(phi) - bik * std::cos(phi));
    });
    h[i] = -grid.buses[i].p_load - p;
    h[nb + i] = -grid.buses[i].q_load - q;
  }
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    const std::size_t i = grid.generators[g].bus_index;
    if (i < nb) {
      h[i] += x[lo.p(g)];
      h[nb + i] += x[lo.q(g)];
    }
  }
  return h;
}

SparseMatrix balance_jacobian(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "balance_jacobian");
  const auto& grid = model.grid();
  const StateLayout& lo = model.layout();
  const std::size_t nb = model.num_balance_buses();
  Triplets entries;
  for (std::size_t i = 0; i < nb; ++i) {
    const double vi = x[lo.v(i)];
    const double ti = x[lo.theta(i)];
    const int row_p = static_cast<int>(i);
    const int row_q = static_cast<int>(nb + i);
    // Diagonal: P_ii = v_i^2 G_ii, Q_ii = -v_i^2 B_ii; angle entry structural.
    entries.emplace_back(row_p, static_cast<int>(lo.theta(i)), 0.0);
    entries.emplace_back(row_q, static_cast<int>(lo.theta(i)), 0.0);
    entries.emplace_back(row_p, static_cast<int>(lo.v(i)), -2.0 * vi * model.G().coeff(i, i));
    entries.emplace_back(row_q, static_cast<int>(lo.v(i)), 2.0 * vi * model.B().coeff(i, i));
    for_each_neighbor(model, i, [&](std::size_t k, double gik, double bik) {
      const std::array<int, 4> cols = {static_cast<int>(lo.theta(i)),
                                       static_cast<int>(lo.theta(k)), static_cast<int>(lo.v(i)),
                                       static_cast<int>(lo.v(k))};
      const Term tp = eval_term(0.0, gik, bik, ti, x[lo.theta(k)], vi, x[lo.v(k)]);
      const Term tq = eval_term(0.0, -bik, gik, ti, x[lo.theta(k)], vi, x[lo.v(k)]);
      for (int a = 0; a < 4; ++a) {
        entries.emplace_back(row_p, cols[a], -tp.grad[a]);
        entries.emplace_back(row_q, cols[a], -tq.grad[a]);
      }
    });
  }
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    const std::size_t i = grid.generators[g].bus_index;
    if (i < nb) {
      entries.emplace_back(static_cast<int>(i), static_cast<int>(lo.p(g)), 1.0);
      entries.emplace_back(static_cast<int>(nb + i), static_cast<int>(lo.q(g)), 1.0);
    }
  }
  return from_triplets(2 * nb, model.dim(), entries);
}

FlowReport line_flows(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "line_flows");
  const StateLayout& lo = model.layout();
  FlowReport report;
  for (const auto& br : model.grid().branches) {
    const auto [yf, yt] = branch_admittance(br);
    const double tf = x[lo.theta(br.from)];
    const double tt = x[lo.theta(br.to)];
    const double vf = x[lo.v(br.from)];
    const double vt = x[lo.v(br.to)];
    const auto [pf, qf] = end_flow(yf, tf, tt, vf, vt);
    const auto [pt, qt] = end_flow(yt, tt, tf, vt, vf);
    report.from_end.push_back({pf.value, qf.value, std::hypot(pf.value, qf.value)});
    report.to_end.push_back({pt.value, qt.value, std::hypot(pt.value, qt.value)});
  }
  return report;
}

Eigen::VectorXd flow_limit_residual(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "flow_limit_residual");
  const StateLayout& lo = model.layout();
  Eigen::VectorXd c(static_cast<Eigen::Index>(model.num_flow_rows()));
  Eigen::Index row = 0;
  for (std::size_t k : model.limited_branches()) {
    const auto& br = model.grid().branches[k];
    const auto [yf, yt] = branch_admittance(br);
    const double tf = x[lo.theta(br.from)];
    const double tt = x[lo.theta(br.to)];
    const double vf = x[lo.v(br.from)];
    const double vt = x[lo.v(br.to)];
    const double limit = br.s_max * br.s_max;
    const auto [pf, qf] = end_flow(yf, tf, tt, vf, vt);
    const auto [pt, qt] = end_flow(yt, tt, tf, vt, vf);
    c[row++] = pf.value * pf.value + qf.value * qf.value - limit;
    c[row++] = pt.value * pt.value + qt.value * qt.value - limit;
  }
  return c;
}

SparseMatrix flow_limit_jacobian(const OpfModel& model, const Eigen::VectorXd& x) {
  check_dim(model, x, "flow_limit_jacobian");
  const StateLayout& lo = model.layout();
  Triplets entries;
  int row = 0;
  for (std::size_t k : model.limited_branches()) {
    const auto& br = model.grid().branches[k];
    const auto [yf, yt] = branch_admittance(br);
    for (int end = 0; end < 2; ++end) {
      const std::size_t i = end == 0 ? br.from : br.to;
      const std::size_t j = end == 0 ? br.to : br.from;
      const auto [p, q] =
          end_flow(end == 0 ? yf : yt, x[lo.theta(i)], x[lo.theta(j)], x[lo.v(i)], x[lo.v(j)]);
      const std::array<std::size_t, 4> cols = {lo.theta(i), lo.theta(j), lo.v(i), lo.v(j)};
      for (int a = 0; a < 4; ++a) {
        entries.emplace_back(row, static_cast<int>(cols[a]),
                             2.0 * (p.value * p.grad[a] + q.value * q.grad[a]));
      }
      ++row;
    }
  }
  return from_triplets(model.num_flow_rows(), model.dim(), entries);
}

SparseMatrix lagrangian_hessian(const OpfModel& model, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& kappa, const Eigen::VectorXd& mu,
                                double cost_weight) {
  check_dim(model, x, "lagrangian_hessian");
  const StateLayout& lo = model.layout();
  const std::size_t nb = model.num_balance_buses();
  if (static_cast<std::size_t>(kappa.size()) != 2 * nb) {
    throw std::invalid_argument(fmt::format("lagrangian_hessian: kappa has length {}, expected {}",
                                            kappa.size(), 2 * nb));
  }
  if (mu.size() != 0 && static_cast<std::size_t>(mu.size()) != model.num_flow_rows()) {
    throw std::invalid_argument(fmt::format("lagrangian_hessian: mu has length {}, expected {}",
                                            mu.size(), model.num_flow_rows()));
  }
  Triplets entries;
  const Eigen::VectorXd cost = objective_hessian_diagonal(model);
  for (std::size_t g = 0; g < model.grid().generators.size(); ++g) {
    const auto idx = static_cast<int>(lo.p(g));
    entries.emplace_back(idx, idx, cost_weight * cost[idx]);
  }

  for (std::size_t i = 0; i < nb; ++i) {
    const double kp = kappa[static_cast<Eigen::Index>(i)];
    const double kq = kappa[static_cast<Eigen::Index>(nb + i)];
    const double vi = x[lo.v(i)];
    const double ti = x[lo.theta(i)];
    const auto vi_idx = static_cast<int>(lo.v(i));
    // h rows carry -P_i and -Q_i.
    entries.emplace_back(vi_idx, vi_idx,
                         -kp * 2.0 * model.G().coeff(i, i) + kq * 2.0 * model.B().coeff(i, i));
    for_each_neighbor(model, i, [&](std::size_t k, double gik, double bik) {
      const std::array<std::size_t, 4> idx = {lo.theta(i), lo.theta(k), lo.v(i), lo.v(k)};
      const Term tp = eval_term(0.0, gik, bik, ti, x[lo.theta(k)], vi, x[lo.v(k)]);
      const Term tq = eval_term(0.0, -bik, gik, ti, x[lo.theta(k)], vi, x[lo.v(k)]);
      add_hessian(entries, idx, tp.hess, -kp);
      add_hessian(entries, idx, tq.hess, -kq);
    });
  }

  if (mu.size() != 0) {
    Eigen::Index row = 0;
    for (std::size_t k : model.limited_branches()) {
      const auto& br = model.grid().branches[k];
      const auto [yf, yt] = branch_admittance(br);
      for (int end = 0; end < 2; ++end) {
        const double w = mu[row++];
        if (w == 0.0) {
          continue;
        }
        const std::size_t i = end == 0 ? br.from : br.to;
        const std::size_t j = end == 0 ? br.to : br.from;
        const auto [p, q] = end_flow(end == 0 ? yf : yt, x[lo.theta(i)], x[lo.theta(j)],
                                     x[lo.v(i)], x[lo.v(j)]);
        const std::array<std::size_t, 4> idx = {lo.theta(i), lo.theta(j), lo.v(i), lo.v(j)};
        std::array<std::array<double, 4>, 4> h{};
        for (int a = 0; a < 4; ++a) {
          for (int b = 0; b < 4; ++b) {
            h[a][b] = 2.0 * (p.grad[a] * p.grad[b] + p.value * p.hess[a][b] +
                             q.grad[a] * q.grad[b] + q.value * q.hess[a][b]);
          }
        }
        add_hessian(entries, idx, h, w);
      }
    }
  }
  return from_triplets(model.dim(), model.dim(), entries);
}

VariableBounds variable_bounds(const OpfModel& model) {
  const auto& grid = model.grid();
  const StateLayout& lo = model.layout();
  const auto n = static_cast<Eigen::Index>(model.dim());
  const double inf = std::numeric_limits<double>::infinity();
  VariableBounds bounds{Eigen::VectorXd::Constant(n, -inf), Eigen::VectorXd::Constant(n, inf)};
  for (std::size_t i = 0; i < grid.buses.size(); ++i) {
    bounds.lower[lo.v(i)] = grid.buses[i].v_min;
    bounds.upper[lo.v(i)] = grid.buses[i].v_max;
  }
  if (auto ref = model.fixed_angle_bus()) {
    bounds.lower[lo.theta(*ref)] = 0.0;
    bounds.upper[lo.theta(*ref)] = 0.0;
  }
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    const auto& gen = grid.generators[g];
    bounds.lower[lo.p(g)] = gen.p_min;
    bounds.upper[lo.p(g)] = gen.p_max;
    bounds.lower[lo.q(g)] = gen.q_min;
    bounds.upper[lo.q(g)] = gen.q_max;
  }
  return bounds;
}

Eigen::VectorXd flat_start(const OpfModel& model) {
  const auto& grid = model.grid();
  const StateLayout& lo = model.layout();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.dim()));
  for (std::size_t i = 0; i < grid.buses.size(); ++i) {
    x[lo.v(i)] = 1.0;
  }
  for (std::size_t g = 0; g < grid.generators.size(); ++g) {
    const auto& gen = grid.generators[g];
    x[lo.p(g)] = std::clamp(gen.p_init, gen.p_min, gen.p_max);
    x[lo.q(g)] = std::clamp(gen.q_init, gen.q_min, gen.q_max);
  }
  return x;
}

}  // namespace dopf
