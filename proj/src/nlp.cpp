#include "dopf/nlp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

#include <Eigen/OrderingMethods>
#include <Eigen/SparseCholesky>
#include <fmt/format.h>

namespace dopf {

std::string to_string(NlpStatus status) {
  switch (status) {
    case NlpStatus::optimal:
      return "optimal";
    case NlpStatus::max_iter:
      return "max_iter";
    case NlpStatus::infeasible_detected:
      return "infeasible_detected";
    case NlpStatus::numerical_failure:
      return "numerical_failure";
  }
  return "unknown";
}

void NlpProblem::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) {
      throw std::invalid_argument("NlpProblem: " + what);
    }
  };
  const auto n = static_cast<Eigen::Index>(num_vars);
  check(lower.size() == n && upper.size() == n && x0.size() == n, "bound or x0 dimension");
  check(static_cast<bool>(objective) && static_cast<bool>(gradient) &&
            static_cast<bool>(hessian),
        "objective callbacks missing");
  check(num_eq == 0 || (eq && eq_jacobian), "equality callbacks missing");
  check(num_ineq == 0 || (ineq && ineq_jacobian), "inequality callbacks missing");
  for (Eigen::Index i = 0; i < n; ++i) {
    check(!(lower[i] > upper[i]), fmt::format("lower > upper at variable {}", i));
    check(!std::isnan(lower[i]) && !std::isnan(upper[i]), "NaN bound");
  }
}

namespace {

using Permutation = Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int>;

// Sparse LDL^T of a symmetric quasi-definite KKT matrix (lower triangle given).
// Primal variables are ordered by AMD on pattern(W + J^T J); each constraint row
// is eliminated right after the last primal variable it touches, so constraint
// pivots are Schur complements rather than the bare dual regularization.
class KktFactor {
 public:
  bool factorize(const SparseMatrix& k, Eigen::Index num_primal) {
    if (!same_pattern(k)) {
      analyze(k, num_primal);
    }
    SparseMatrix kp(k.rows(), k.cols());
    kp.selfadjointView<Eigen::Lower>() = k.selfadjointView<Eigen::Lower>().twistedBy(perm_);
    ldlt_.factorize(kp);
    return ldlt_.info() == Eigen::Success;
  }

  // Counts of positive, negative and zero pivots of the last factorization.
  std::array<Eigen::Index, 3> inertia() const {
    std::array<Eigen::Index, 3> counts{0, 0, 0};
    const Eigen::VectorXd d = ldlt_.vectorD();
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i]) || d[i] == 0.0) {
        ++counts[2];
      } else if (d[i] > 0.0) {
        ++counts[0];
      } else {
        ++counts[1];
      }
    }
    return counts;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    Eigen::VectorXd permuted = perm_ * rhs;
    Eigen::VectorXd sol = ldlt_.solve(permuted);
    return perm_.transpose() * sol;
  }

 private:
  bool same_pattern(const SparseMatrix& k) const {
    if (k.rows() != rows_ || static_cast<std::size_t>(k.nonZeros()) != inner_.size()) {
      return false;
    }
    return std::equal(k.outerIndexPtr(), k.outerIndexPtr() + k.outerSize() + 1, outer_.begin()) &&
           std::equal(k.innerIndexPtr(), k.innerIndexPtr() + k.nonZeros(), inner_.begin());
  }

  void analyze(const SparseMatrix& k, Eigen::Index num_primal) {
    const Eigen::Index n = k.rows();
    std::vector<Eigen::Triplet<double>> pattern;
    std::vector<std::vector<int>> row_vars(static_cast<std::size_t>(n - num_primal));
    for (Eigen::Index col = 0; col < k.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(k, col); it; ++it) {
        const auto r = it.row();
        if (r < num_primal) {
          pattern.emplace_back(static_cast<int>(r), static_cast<int>(col), 1.0);
          pattern.emplace_back(static_cast<int>(col), static_cast<int>(r), 1.0);
        } else if (col < num_primal) {
          row_vars[static_cast<std::size_t>(r - num_primal)].push_back(static_cast<int>(col));
        }
      }
    }
    for (const auto& vars : row_vars) {
      for (int a : vars) {
        for (int b : vars) {
          pattern.emplace_back(a, b, 1.0);
        }
      }
    }
    SparseMatrix primal(num_primal, num_primal);
    primal.setFromTriplets(pattern.begin(), pattern.end());
    Permutation primal_order;  // new -> old
    if (num_primal > 0) {
      Eigen::AMDOrdering<int> amd;
      amd(primal, primal_order);
    }

    std::vector<Eigen::Index> rank(static_cast<std::size_t>(num_primal));
    for (Eigen::Index p = 0; p < num_primal; ++p) {
      rank[static_cast<std::size_t>(primal_order.indices()[p])] = p;
    }
    // Bucket constraint rows by the latest-eliminated primal variable they touch.
    std::vector<std::vector<Eigen::Index>> after(static_cast<std::size_t>(num_primal) + 1);
    for (std::size_t r = 0; r < row_vars.size(); ++r) {
      Eigen::Index last = -1;
      for (int v : row_vars[r]) {
        last = std::max(last, rank[static_cast<std::size_t>(v)]);
      }
      after[static_cast<std::size_t>(last + 1)].push_back(num_primal +
                                                          static_cast<Eigen::Index>(r));
    }
    perm_.resize(n);
    Eigen::Index next = 0;
    auto place = [&](Eigen::Index old) { perm_.indices()[old] = static_cast<int>(next++); };
    for (Eigen::Index r : after[0]) {
      place(r);
    }
    for (Eigen::Index p = 0; p < num_primal; ++p) {
      place(primal_order.indices()[p]);
      for (Eigen::Index r : after[static_cast<std::size_t>(p + 1)]) {
        place(r);
      }
    }

    SparseMatrix kp(n, n);
    kp.selfadjointView<Eigen::Lower>() = k.selfadjointView<Eigen::Lower>().twistedBy(perm_);
    ldlt_.analyzePattern(kp);
    rows_ = n;
    outer_.assign(k.outerIndexPtr(), k.outerIndexPtr() + k.outerSize() + 1);
    inner_.assign(k.innerIndexPtr(), k.innerIndexPtr() + k.nonZeros());
  }

  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::NaturalOrdering<int>> ldlt_;
  Permutation perm_;
  Eigen::Index rows_ = -1;
  std::vector<int> outer_;
  std::vector<int> inner_;
};

struct Evaluation {
  double f = 0.0;
  Eigen::VectorXd g;
  Eigen::VectorXd h;
  Eigen::VectorXd c;
  SparseMatrix jh;
  SparseMatrix jc;
};

bool finite(const Eigen::VectorXd& v) { return v.allFinite(); }

class InteriorPoint {
 public:
  InteriorPoint(const NlpProblem& p, const NlpOptions& o) : p_(p), o_(o) {
    n_ = static_cast<Eigen::Index>(p.num_vars);
    me_ = static_cast<Eigen::Index>(p.num_eq);
    mi_ = static_cast<Eigen::Index>(p.num_ineq);
    pos_.assign(static_cast<std::size_t>(n_), -1);
    has_l_.assign(static_cast<std::size_t>(n_), false);
    has_u_.assign(static_cast<std::size_t>(n_), false);
    for (Eigen::Index j = 0; j < n_; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      if (p.lower[j] == p.upper[j]) {
        continue;
      }
      pos_[jj] = static_cast<int>(free_.size());
      free_.push_back(j);
      has_l_[jj] = std::isfinite(p.lower[j]);
      has_u_[jj] = std::isfinite(p.upper[j]);
    }
    nf_ = static_cast<Eigen::Index>(free_.size());
  }

  NlpSolution run();

 private:
  Evaluation evaluate(const Eigen::VectorXd& x, bool derivatives) const {
    Evaluation e;
    e.f = p_.objective(x);
    e.h = me_ > 0 ? p_.eq(x) : Eigen::VectorXd();
    e.c = mi_ > 0 ? p_.ineq(x) : Eigen::VectorXd();
    if (derivatives) {
      e.g = p_.gradient(x);
      e.jh = me_ > 0 ? p_.eq_jacobian(x) : SparseMatrix(0, n_);
      e.jc = mi_ > 0 ? p_.ineq_jacobian(x) : SparseMatrix(0, n_);
      if (e.g.size() != n_ || e.jh.rows() != me_ || e.jh.cols() != n_ || e.jc.rows() != mi_ ||
          e.jc.cols() != n_) {
        throw std::invalid_argument("NlpProblem: callback returned wrong dimensions");
      }
    }
    if (e.h.size() != me_ || e.c.size() != mi_) {
      throw std::invalid_argument("NlpProblem: constraint callback returned wrong dimension");
    }
    return e;
  }

  double infeasibility(const Evaluation& e, const Eigen::VectorXd& s) const {
    double t = e.h.lpNorm<1>();
    if (mi_ > 0) {
      t += (e.c + s).lpNorm<1>();
    }
    return t;
  }

  double barrier(const Evaluation& e, const Eigen::VectorXd& x, const Eigen::VectorXd& s,
                 double mu) const {
    double phi = scale_ * e.f;
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      if (has_l_[jj]) {
        phi -= mu * std::log(x[j] - p_.lower[j]);
      }
      if (has_u_[jj]) {
        phi -= mu * std::log(p_.upper[j] - x[j]);
      }
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      phi -= mu * std::log(s[i]);
    }
    return phi;
  }

  // Gradient of the scaled Lagrangian over all variables.
  Eigen::VectorXd lagrangian_gradient(const Evaluation& e) const {
    Eigen::VectorXd r = scale_ * e.g - zl_ + zu_;
    if (me_ > 0) {
      r += e.jh.transpose() * ye_;
    }
    if (mi_ > 0) {
      r += e.jc.transpose() * yi_;
    }
    return r;
  }

  double free_norm(const Eigen::VectorXd& v) const {
    double m = 0.0;
    for (Eigen::Index j : free_) {
      m = std::max(m, std::abs(v[j]));
    }
    return m;
  }

  double complementarity(double mu) const {
    double m = 0.0;
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      if (has_l_[jj]) {
        m = std::max(m, std::abs((x_[j] - p_.lower[j]) * zl_[j] - mu));
      }
      if (has_u_[jj]) {
        m = std::max(m, std::abs((p_.upper[j] - x_[j]) * zu_[j] - mu));
      }
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      m = std::max(m, std::abs(s_[i] * yi_[i] - mu));
    }
    return m;
  }

  double barrier_error(const Evaluation& e, double mu) const {
    double sum = ye_.lpNorm<1>() + yi_.lpNorm<1>() + zl_.lpNorm<1>() + zu_.lpNorm<1>();
    const double count = static_cast<double>(me_ + 2 * mi_ + 2 * nf_);
    const double sd = count > 0 ? std::max(1.0, sum / count / 100.0) : 1.0;
    double feas = e.h.size() > 0 ? e.h.lpNorm<Eigen::Infinity>() : 0.0;
    if (mi_ > 0) {
      feas = std::max(feas, (e.c + s_).lpNorm<Eigen::Infinity>());
    }
    return std::max({free_norm(lagrangian_gradient(e)) / sd, feas, complementarity(mu) / sd});
  }

  SparseMatrix assemble(const Evaluation& e, const SparseMatrix& hess, double delta_w,
                        double delta_c) const;
  bool factorize_with_correction(const Evaluation& e, const SparseMatrix& hess,
                                 SparseMatrix& kkt);
  Eigen::VectorXd solve_refined(const SparseMatrix& kkt, const Eigen::VectorXd& rhs,
                                double delta_c) const;
  void initialize_multipliers(const Evaluation& e);
  KktMultipliers unscaled_multipliers(const Evaluation& e) const;
  NlpSolution finish(NlpStatus status, const Evaluation& e, int iter);

  const NlpProblem& p_;
  const NlpOptions& o_;
  Eigen::Index n_ = 0, me_ = 0, mi_ = 0, nf_ = 0;
  std::vector<Eigen::Index> free_;
  std::vector<int> pos_;
  std::vector<bool> has_l_, has_u_;

  Eigen::VectorXd x_, s_, ye_, yi_, zl_, zu_;
  double scale_ = 1.0;
  double mu_ = 0.1;
  double last_delta_w_ = 0.0;
  KktFactor factor_;
  std::vector<NlpIteration> history_;
};

SparseMatrix InteriorPoint::assemble(const Evaluation& e, const SparseMatrix& hess,
                                     double delta_w, double delta_c) const {
  const Eigen::Index dim = nf_ + me_ + mi_;
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(static_cast<std::size_t>(hess.nonZeros() + e.jh.nonZeros() + e.jc.nonZeros() + dim));
  for (Eigen::Index col = 0; col < hess.outerSize(); ++col) {
    const int pc = pos_[static_cast<std::size_t>(col)];
    if (pc < 0) {
      continue;
    }
    for (SparseMatrix::InnerIterator it(hess, col); it; ++it) {
      const int pr = pos_[static_cast<std::size_t>(it.row())];
      if (pr >= pc) {
        t.emplace_back(pr, pc, it.value());
      }
    }
  }
  for (Eigen::Index j : free_) {
    const auto jj = static_cast<std::size_t>(j);
    double sigma = delta_w;
    if (has_l_[jj]) {
      sigma += zl_[j] / (x_[j] - p_.lower[j]);
    }
    if (has_u_[jj]) {
      sigma += zu_[j] / (p_.upper[j] - x_[j]);
    }
    t.emplace_back(pos_[jj], pos_[jj], sigma);
  }
  auto add_jacobian = [&](const SparseMatrix& jac, Eigen::Index offset) {
    for (Eigen::Index col = 0; col < jac.outerSize(); ++col) {
      const int pc = pos_[static_cast<std::size_t>(col)];
      if (pc < 0) {
        continue;
      }
      for (SparseMatrix::InnerIterator it(jac, col); it; ++it) {
        t.emplace_back(static_cast<int>(offset + it.row()), pc, it.value());
      }
    }
  };
  add_jacobian(e.jh, nf_);
  add_jacobian(e.jc, nf_ + me_);
  for (Eigen::Index r = 0; r < me_; ++r) {
    t.emplace_back(static_cast<int>(nf_ + r), static_cast<int>(nf_ + r), -delta_c);
  }
  for (Eigen::Index r = 0; r < mi_; ++r) {
    const auto idx = static_cast<int>(nf_ + me_ + r);
    t.emplace_back(idx, idx, -s_[r] / yi_[r] - delta_c);
  }
  SparseMatrix k(dim, dim);
  k.setFromTriplets(t.begin(), t.end());
  k.makeCompressed();
  return k;
}

bool InteriorPoint::factorize_with_correction(const Evaluation& e, const SparseMatrix& hess,
                                              SparseMatrix& kkt) {
  double delta_w = 0.0;
  bool first = true;
  while (true) {
    kkt = assemble(e, hess, delta_w, o_.constraint_reg);
    if (factor_.factorize(kkt, nf_)) {
      const auto in = factor_.inertia();
      if (in[0] == nf_ && in[1] == me_ + mi_ && in[2] == 0) {
        last_delta_w_ = delta_w;
        return true;
      }
    }
    if (first) {
      delta_w = last_delta_w_ == 0.0 ? o_.reg_init : std::max(o_.reg_init, last_delta_w_ / 3.0);
      first = false;
    } else {
      delta_w *= o_.reg_growth;
    }
    if (delta_w > o_.reg_max) {
      return false;
    }
  }
}

Eigen::VectorXd InteriorPoint::solve_refined(const SparseMatrix& kkt, const Eigen::VectorXd& rhs,
                                             double delta_c) const {
  // Refine against the system without the dual regularization.
  auto apply = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd r = kkt.selfadjointView<Eigen::Lower>() * v;
    r.tail(me_ + mi_) += delta_c * v.tail(me_ + mi_);
    return r;
  };
  Eigen::VectorXd sol = factor_.solve(rhs);
  Eigen::VectorXd res = rhs - apply(sol);
  double best = res.lpNorm<Eigen::Infinity>();
  const double target = 1e-14 * (1.0 + rhs.lpNorm<Eigen::Infinity>());
  for (int k = 0; k < 10 && best > target; ++k) {
    Eigen::VectorXd trial = sol + factor_.solve(res);
    Eigen::VectorXd trial_res = rhs - apply(trial);
    const double norm = trial_res.lpNorm<Eigen::Infinity>();
    if (!(norm < 0.9 * best)) {
      break;
    }
    sol = std::move(trial);
    res = std::move(trial_res);
    best = norm;
  }
  return sol;
}

void InteriorPoint::initialize_multipliers(const Evaluation& e) {
  ye_ = Eigen::VectorXd::Zero(me_);
  if (me_ == 0) {
    return;
  }
  // Least squares: min || scale g - zl + zu + Jc^T yi + Jh^T y ||.
  const Eigen::VectorXd r0 = lagrangian_gradient(e);
  const Eigen::Index dim = nf_ + me_ + mi_;
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index p = 0; p < nf_; ++p) {
    t.emplace_back(static_cast<int>(p), static_cast<int>(p), 1.0);
  }
  for (Eigen::Index col = 0; col < e.jh.outerSize(); ++col) {
    const int pc = pos_[static_cast<std::size_t>(col)];
    if (pc < 0) {
      continue;
    }
    for (SparseMatrix::InnerIterator it(e.jh, col); it; ++it) {
      t.emplace_back(static_cast<int>(nf_ + it.row()), pc, it.value());
    }
  }
  for (Eigen::Index r = 0; r < me_ + mi_; ++r) {
    t.emplace_back(static_cast<int>(nf_ + r), static_cast<int>(nf_ + r), -o_.constraint_reg);
  }
  SparseMatrix k(dim, dim);
  k.setFromTriplets(t.begin(), t.end());
  k.makeCompressed();
  KktFactor ls;
  if (!ls.factorize(k, nf_)) {
    return;
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(dim);
  for (Eigen::Index j : free_) {
    rhs[pos_[static_cast<std::size_t>(j)]] = -r0[j];
  }
  Eigen::VectorXd sol = ls.solve(rhs);
  Eigen::VectorXd y = sol.segment(nf_, me_);
  if (y.allFinite() && y.lpNorm<Eigen::Infinity>() <= 1e3) {
    ye_ = y;
  }
}

KktMultipliers InteriorPoint::unscaled_multipliers(const Evaluation& e) const {
  KktMultipliers m{ye_ / scale_, yi_ / scale_, zl_ / scale_, zu_ / scale_};
  // Fixed variables: bound multipliers absorb their stationarity component.
  if (nf_ < n_ && e.g.size() == n_) {
    Eigen::VectorXd r = e.g;
    if (me_ > 0) {
      r += e.jh.transpose() * m.y_eq;
    }
    if (mi_ > 0) {
      r += e.jc.transpose() * m.y_ineq;
    }
    for (Eigen::Index j = 0; j < n_; ++j) {
      if (pos_[static_cast<std::size_t>(j)] < 0) {
        m.z_lower[j] = std::max(r[j], 0.0);
        m.z_upper[j] = std::max(-r[j], 0.0);
      }
    }
  }
  return m;
}

NlpSolution InteriorPoint::finish(NlpStatus status, const Evaluation& e, int iter) {
  NlpSolution sol;
  sol.status = status;
  sol.x = x_;
  KktMultipliers m = unscaled_multipliers(e);
  sol.y_eq = std::move(m.y_eq);
  sol.y_ineq = std::move(m.y_ineq);
  sol.z_lower = std::move(m.z_lower);
  sol.z_upper = std::move(m.z_upper);
  sol.objective = e.f;
  sol.iterations = iter;
  sol.history = std::move(history_);
  sol.kkt_residual = kkt_residual(p_, sol.x, {sol.y_eq, sol.y_ineq, sol.z_lower, sol.z_upper},
                                  true);
  return sol;
}

NlpSolution InteriorPoint::run() {
  const double tau = o_.fraction_to_boundary;

  // Starting point pushed strictly inside the bounds.
  x_ = p_.x0;
  for (Eigen::Index j = 0; j < n_; ++j) {
    const double l = p_.lower[j];
    const double u = p_.upper[j];
    if (l == u) {
      x_[j] = l;
      continue;
    }
    double pl = o_.bound_push * std::max(1.0, std::abs(l));
    double pu = o_.bound_push * std::max(1.0, std::abs(u));
    if (std::isfinite(l) && std::isfinite(u)) {
      pl = std::min(pl, o_.bound_push * (u - l));
      pu = std::min(pu, o_.bound_push * (u - l));
    }
    if (std::isfinite(l)) {
      x_[j] = std::max(x_[j], l + pl);
    }
    if (std::isfinite(u)) {
      x_[j] = std::min(x_[j], u - pu);
    }
  }

  Evaluation e = evaluate(x_, true);
  if (!std::isfinite(e.f) || !finite(e.g) || !finite(e.h) || !finite(e.c)) {
    return finish(NlpStatus::numerical_failure, e, 0);
  }
  const double g0 = e.g.lpNorm<Eigen::Infinity>();
  scale_ = g0 > o_.max_objective_gradient ? o_.max_objective_gradient / g0 : 1.0;
  // Complementarity is tested unscaled, so the floor follows the scaling.
  const double mu_min = o_.tol * scale_ / 10.0;

  s_ = Eigen::VectorXd(mi_);
  for (Eigen::Index i = 0; i < mi_; ++i) {
    s_[i] = std::max(-e.c[i], o_.bound_push);
  }
  yi_ = Eigen::VectorXd::Ones(mi_);
  zl_ = Eigen::VectorXd::Zero(n_);
  zu_ = Eigen::VectorXd::Zero(n_);
  for (Eigen::Index j : free_) {
    if (has_l_[static_cast<std::size_t>(j)]) {
      zl_[j] = 1.0;
    }
    if (has_u_[static_cast<std::size_t>(j)]) {
      zu_[j] = 1.0;
    }
  }
  initialize_multipliers(e);
  mu_ = o_.mu_init;

  const double theta0 = infeasibility(e, s_);
  const double theta_max = 1e4 * std::max(1.0, theta0);
  const double theta_min = 1e-4 * std::max(1.0, theta0);
  std::vector<std::pair<double, double>> filter;
  int fallbacks = 0;

  for (int iter = 0;; ++iter) {
    // Convergence on the unscaled problem.
    const KktMultipliers mult = unscaled_multipliers(e);
    const double gnorm = 1.0 + e.g.lpNorm<Eigen::Infinity>();
    const double stat = free_norm(lagrangian_gradient(e)) / scale_ / gnorm;
    double feas = me_ > 0 ? e.h.lpNorm<Eigen::Infinity>() : 0.0;
    if (mi_ > 0) {
      feas = std::max(feas, (e.c + s_).lpNorm<Eigen::Infinity>());
    }
    const double compl_err = complementarity(0.0) / scale_ / gnorm;
    const double kkt = std::max({stat, feas, compl_err});
    if (stat <= o_.tol && feas <= o_.tol && compl_err <= o_.tol &&
        kkt_residual(p_, x_, mult, true) <= o_.tol) {
      return finish(NlpStatus::optimal, e, iter);
    }
    if (iter >= o_.max_iter) {
      return finish(NlpStatus::max_iter, e, iter);
    }

    // Monotone barrier update.
    while (mu_ > mu_min && barrier_error(e, mu_) <= 10.0 * mu_) {
      mu_ = std::max(mu_min, std::min(o_.mu_linear_factor * mu_,
                                       std::pow(mu_, o_.mu_superlinear_power)));
      filter.clear();
    }

    const SparseMatrix hess = p_.hessian(x_, scale_, ye_, yi_);
    SparseMatrix kkt_matrix;
    if (!factorize_with_correction(e, hess, kkt_matrix)) {
      return finish(NlpStatus::numerical_failure, e, iter);
    }

    // Right-hand side.
    const Eigen::Index dim = nf_ + me_ + mi_;
    Eigen::VectorXd rhs(dim);
    Eigen::VectorXd grad_no_z = scale_ * e.g;
    if (me_ > 0) {
      grad_no_z += e.jh.transpose() * ye_;
    }
    if (mi_ > 0) {
      grad_no_z += e.jc.transpose() * yi_;
    }
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      double r = -grad_no_z[j];
      if (has_l_[jj]) {
        r += mu_ / (x_[j] - p_.lower[j]);
      }
      if (has_u_[jj]) {
        r -= mu_ / (p_.upper[j] - x_[j]);
      }
      rhs[pos_[jj]] = r;
    }
    if (me_ > 0) {
      rhs.segment(nf_, me_) = -e.h;
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      rhs[nf_ + me_ + i] = -e.c[i] - mu_ / yi_[i];
    }
    const Eigen::VectorXd sol = solve_refined(kkt_matrix, rhs, o_.constraint_reg);
    if (!sol.allFinite()) {
      return finish(NlpStatus::numerical_failure, e, iter);
    }

    Eigen::VectorXd dx = Eigen::VectorXd::Zero(n_);
    for (Eigen::Index j : free_) {
      dx[j] = sol[pos_[static_cast<std::size_t>(j)]];
    }
    const Eigen::VectorXd dye = sol.segment(nf_, me_);
    const Eigen::VectorXd dyi = sol.segment(nf_ + me_, mi_);
    Eigen::VectorXd ds(mi_);
    for (Eigen::Index i = 0; i < mi_; ++i) {
      ds[i] = mu_ / yi_[i] - s_[i] - s_[i] / yi_[i] * dyi[i];
    }
    Eigen::VectorXd dzl = Eigen::VectorXd::Zero(n_);
    Eigen::VectorXd dzu = Eigen::VectorXd::Zero(n_);
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      if (has_l_[jj]) {
        const double gap = x_[j] - p_.lower[j];
        dzl[j] = mu_ / gap - zl_[j] - zl_[j] / gap * dx[j];
      }
      if (has_u_[jj]) {
        const double gap = p_.upper[j] - x_[j];
        dzu[j] = mu_ / gap - zu_[j] + zu_[j] / gap * dx[j];
      }
    }

    // Fraction to the boundary.
    double alpha_primal = 1.0;
    double alpha_dual = 1.0;
    auto limit = [&](double& alpha, double value, double step) {
      if (step < 0.0) {
        alpha = std::min(alpha, -tau * value / step);
      }
    };
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      if (has_l_[jj]) {
        limit(alpha_primal, x_[j] - p_.lower[j], dx[j]);
        limit(alpha_dual, zl_[j], dzl[j]);
      }
      if (has_u_[jj]) {
        limit(alpha_primal, p_.upper[j] - x_[j], -dx[j]);
        limit(alpha_dual, zu_[j], dzu[j]);
      }
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      limit(alpha_primal, s_[i], ds[i]);
      limit(alpha_dual, yi_[i], dyi[i]);
    }

    // Filter line search.
    const double theta = infeasibility(e, s_);
    const double phi = barrier(e, x_, s_, mu_);
    double dphi = 0.0;
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      double gj = scale_ * e.g[j];
      if (has_l_[jj]) {
        gj -= mu_ / (x_[j] - p_.lower[j]);
      }
      if (has_u_[jj]) {
        gj += mu_ / (p_.upper[j] - x_[j]);
      }
      dphi += gj * dx[j];
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      dphi -= mu_ / s_[i] * ds[i];
    }
    constexpr double gamma_theta = 1e-5;
    constexpr double gamma_phi = 1e-8;
    constexpr double eta_phi = 1e-4;
    constexpr double s_theta = 1.1;
    constexpr double s_phi = 2.3;
    double alpha_min = 0.05 * gamma_theta;
    if (dphi < 0.0) {
      alpha_min = 0.05 * std::min({gamma_theta, gamma_phi * theta / -dphi,
                                   std::pow(theta, s_theta) / std::pow(-dphi, s_phi)});
      if (theta > theta_min) {
        alpha_min = 0.05 * std::min(gamma_theta, gamma_phi * theta / -dphi);
      }
    }
    alpha_min = std::max(alpha_min, 1e-14);

    double alpha = alpha_primal;
    bool accepted = false;
    bool f_type = false;
    Evaluation trial;
    Eigen::VectorXd x_trial;
    Eigen::VectorXd s_trial;
    while (alpha >= alpha_min) {
      x_trial = x_ + alpha * dx;
      s_trial = s_ + alpha * ds;
      trial = evaluate(x_trial, false);
      const bool ok = std::isfinite(trial.f) && finite(trial.h) && finite(trial.c);
      if (ok) {
        const double theta_t = infeasibility(trial, s_trial);
        const double phi_t = barrier(trial, x_trial, s_trial, mu_);
        if (std::isfinite(phi_t) && theta_t <= theta_max) {
          const bool in_filter = std::any_of(filter.begin(), filter.end(), [&](const auto& f) {
            return theta_t >= f.first && phi_t >= f.second;
          });
          const bool switching =
              dphi < 0.0 &&
              alpha * std::pow(-dphi, s_phi) > std::pow(theta, s_theta);
          if (switching && theta <= theta_min) {
            if (phi_t <= phi + eta_phi * alpha * dphi && !in_filter) {
              accepted = true;
              f_type = true;
            }
          } else if (!in_filter && (theta_t <= (1.0 - gamma_theta) * theta ||
                                    phi_t <= phi - gamma_phi * theta)) {
            accepted = true;
          }
        }
      }
      if (accepted) {
        break;
      }
      alpha *= 0.5;
    }

    bool filter_ok = accepted;
    if (!accepted) {
      // No restoration phase: take the fraction-to-boundary step and restart
      // the filter from it.
      alpha = alpha_primal;
      x_trial = x_ + alpha * dx;
      s_trial = s_ + alpha * ds;
      trial = evaluate(x_trial, false);
      if (!std::isfinite(trial.f) || !finite(trial.h) || !finite(trial.c)) {
        return finish(NlpStatus::numerical_failure, e, iter);
      }
      filter.clear();
      ++fallbacks;
    } else {
      fallbacks = 0;
      if (!f_type) {
        filter.emplace_back((1.0 - gamma_theta) * theta, phi - gamma_phi * theta);
      }
    }

    history_.push_back({iter, e.f, mu_, theta, phi, kkt, last_delta_w_, alpha, filter_ok});
    if (o_.verbose) {
      fmt::print("{:4d} f={:.10e} mu={:.2e} theta={:.2e} kkt={:.2e} reg={:.1e} alpha={:.2e}{}\n",
                 iter, e.f, mu_, theta, kkt, last_delta_w_, alpha, filter_ok ? "" : " *");
    }

    x_ = x_trial;
    s_ = s_trial;
    ye_ += alpha * dye;
    yi_ += alpha_dual * dyi;
    zl_ += alpha_dual * dzl;
    zu_ += alpha_dual * dzu;

    // Keep bound multipliers within a factor of their central-path values.
    constexpr double kappa_sigma = 1e10;
    for (Eigen::Index j : free_) {
      const auto jj = static_cast<std::size_t>(j);
      if (has_l_[jj]) {
        const double gap = x_[j] - p_.lower[j];
        zl_[j] = std::clamp(zl_[j], mu_ / (kappa_sigma * gap), kappa_sigma * mu_ / gap);
      }
      if (has_u_[jj]) {
        const double gap = p_.upper[j] - x_[j];
        zu_[j] = std::clamp(zu_[j], mu_ / (kappa_sigma * gap), kappa_sigma * mu_ / gap);
      }
    }
    for (Eigen::Index i = 0; i < mi_; ++i) {
      yi_[i] = std::clamp(yi_[i], mu_ / (kappa_sigma * s_[i]), kappa_sigma * mu_ / s_[i]);
    }

    e = evaluate(x_, true);
    if (!finite(e.g)) {
      return finish(NlpStatus::numerical_failure, e, iter + 1);
    }
    // Repeated rejected steps at a point that stays infeasible.
    if (fallbacks >= 10 && infeasibility(e, s_) > 1e3 * o_.tol) {
      return finish(NlpStatus::infeasible_detected, e, iter + 1);
    }
  }
}

}  // namespace

NlpSolution solve(const NlpProblem& problem, const NlpOptions& options) {
  problem.validate();
  InteriorPoint ip(problem, options);
  return ip.run();
}

double kkt_residual(const NlpProblem& problem, const Eigen::VectorXd& x,
                    const KktMultipliers& m, bool scaled) {
  const Eigen::VectorXd g = problem.gradient(x);
  Eigen::VectorXd r = g;
  double feas = 0.0;
  double compl_err = 0.0;
  auto vec_or_zero = [](const Eigen::VectorXd& v, Eigen::Index n) {
    return v.size() == n ? v : Eigen::VectorXd::Zero(n);
  };
  const auto n = static_cast<Eigen::Index>(problem.num_vars);
  const Eigen::VectorXd zl = vec_or_zero(m.z_lower, n);
  const Eigen::VectorXd zu = vec_or_zero(m.z_upper, n);
  r += zu - zl;
  if (problem.num_eq > 0) {
    const Eigen::VectorXd y = vec_or_zero(m.y_eq, static_cast<Eigen::Index>(problem.num_eq));
    r += problem.eq_jacobian(x).transpose() * y;
    feas = std::max(feas, problem.eq(x).lpNorm<Eigen::Infinity>());
  }
  if (problem.num_ineq > 0) {
    const Eigen::VectorXd y = vec_or_zero(m.y_ineq, static_cast<Eigen::Index>(problem.num_ineq));
    const Eigen::VectorXd c = problem.ineq(x);
    r += problem.ineq_jacobian(x).transpose() * y;
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      feas = std::max(feas, c[i]);
      compl_err = std::max(compl_err, std::abs(c[i] * y[i]));
    }
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const double l = problem.lower[j];
    const double u = problem.upper[j];
    if (std::isfinite(l)) {
      feas = std::max(feas, l - x[j]);
      compl_err = std::max(compl_err, std::abs((x[j] - l) * zl[j]));
    }
    if (std::isfinite(u)) {
      feas = std::max(feas, x[j] - u);
      compl_err = std::max(compl_err, std::abs((u - x[j]) * zu[j]));
    }
  }
  double stat = r.lpNorm<Eigen::Infinity>();
  if (scaled) {
    const double s = 1.0 + g.lpNorm<Eigen::Infinity>();
    stat /= s;
    compl_err /= s;
  }
  return std::max({stat, feas, compl_err});
}

}  // namespace dopf
