#pragma once

// Direct primal solver for small calibration problems. It shares nothing with
// the dual path except the problem data, so it can serve as a test oracle.

#include <Eigen/Dense>

#include "mlcal/design.hpp"
#include "mlcal/solver.hpp"

namespace mlcal {

namespace detail {

struct EqualityQp {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd lower, upper;
};

struct NullSpace {
  Eigen::VectorXd particular;
  Eigen::MatrixXd basis;
  double residual = 0.0;
};

inline NullSpace null_space(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, Eigen::Index n) {
  NullSpace ns;
  if (A.rows() == 0) {
    ns.particular = Eigen::VectorXd::Zero(n);
    ns.basis = Eigen::MatrixXd::Identity(n, n);
    return ns;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double tol = std::max(A.rows(), A.cols()) * (sv.size() ? sv(0) : 0.0) * 1e-13;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  const Eigen::MatrixXd& U = svd.matrixU();
  const Eigen::MatrixXd& V = svd.matrixV();
  Eigen::VectorXd coef = U.leftCols(rank).transpose() * b;
  for (Eigen::Index i = 0; i < rank; ++i) coef(i) /= sv(i);
  ns.particular = V.leftCols(rank) * coef;
  ns.basis = V.rightCols(n - rank);
  ns.residual = (A * ns.particular - b).norm();
  return ns;
}

/// Minimizer of 0.5 x'Hx + g'x subject to C x = c (C may be empty).
inline std::optional<Eigen::VectorXd> equality_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                                                  const Eigen::MatrixXd& C, const Eigen::VectorXd& c) {
  const auto ns = null_space(C, c, H.rows());
  if (ns.residual > 1e-9 * (1.0 + c.norm())) return std::nullopt;
  if (ns.basis.cols() == 0) return ns.particular;
  const Eigen::MatrixXd R = ns.basis.transpose() * H * ns.basis;
  const Eigen::VectorXd r = -ns.basis.transpose() * (H * ns.particular + g);
  Eigen::LLT<Eigen::MatrixXd> llt(R);
  if (llt.info() != Eigen::Success) return std::nullopt;
  return Eigen::VectorXd(ns.particular + ns.basis * llt.solve(r));
}

/// Accepts x if it is primal feasible and its bound multipliers have the right sign.
inline bool kkt_ok(const EqualityQp& qp, const Eigen::VectorXd& x, const std::vector<int>& state, double tol) {
  const Eigen::Index n = x.size();
  for (Eigen::Index i = 0; i < n; ++i)
    if (x(i) < qp.lower(i) - tol || x(i) > qp.upper(i) + tol) return false;
  if ((qp.A * x - qp.b).norm() > tol * (1.0 + qp.b.norm())) return false;
  // grad = A' nu + sum_active mu_i e_i
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < n; ++i)
    if (state[static_cast<std::size_t>(i)] != 0) active.push_back(i);
  Eigen::MatrixXd M(n, qp.A.rows() + static_cast<Eigen::Index>(active.size()));
  M.leftCols(qp.A.rows()) = qp.A.transpose();
  for (std::size_t a = 0; a < active.size(); ++a) {
    M.col(qp.A.rows() + static_cast<Eigen::Index>(a)).setZero();
    M(active[a], qp.A.rows() + static_cast<Eigen::Index>(a)) = 1.0;
  }
  const Eigen::VectorXd grad = qp.H * x + qp.g;
  if (M.cols() == 0) return grad.norm() <= tol * (1.0 + qp.g.norm());
  const Eigen::VectorXd mult = M.completeOrthogonalDecomposition().solve(grad);
  if ((M * mult - grad).norm() > 1e-7 * (1.0 + grad.norm())) return false;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const double mu = mult(qp.A.rows() + static_cast<Eigen::Index>(a));
    const int st = state[static_cast<std::size_t>(active[a])];
    if (st < 0 && mu < -1e-9 * (1.0 + grad.norm())) return false;
    if (st > 0 && mu > 1e-9 * (1.0 + grad.norm())) return false;
  }
  return true;
}

/// Solves the box- and equality-constrained QP: ADMM on the null-space
/// coordinates of the equalities, then an active-set polish from the ADMM
/// iterate.
inline Eigen::VectorXd solve_box_equality_qp(const EqualityQp& qp, int max_iterations = 400000) {
  const Eigen::Index n = qp.H.rows();
  const auto ns = null_space(qp.A, qp.b, n);
  if (ns.residual > 1e-9 * (1.0 + qp.b.norm())) throw InfeasibleError("equality constraints are inconsistent");
  const Eigen::MatrixXd& Z = ns.basis;
  const Eigen::VectorXd& x0 = ns.particular;
  auto box = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = clip(v(i), qp.lower(i), qp.upper(i));
    return out;
  };
  Eigen::VectorXd x = box(x0), u = Eigen::VectorXd::Zero(n), gamma = x0;
  if (Z.cols() > 0) {
    const Eigen::MatrixXd R = Z.transpose() * qp.H * Z;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(R);
    const double rho = std::sqrt(std::max(es.eigenvalues().maxCoeff(), 1e-300) *
                                 std::max(es.eigenvalues().minCoeff(), 1e-300 * es.eigenvalues().maxCoeff()));
    Eigen::MatrixXd K = R;
    K.diagonal().array() += rho;
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    const Eigen::VectorXd lin = Z.transpose() * (qp.H * x0 + qp.g);
    const double scale = 1.0 + x0.norm();
    for (int it = 0; it < max_iterations; ++it) {
      const Eigen::VectorXd y = llt.solve(-lin - rho * Z.transpose() * (x0 - x + u));
      gamma = x0 + Z * y;
      const Eigen::VectorXd xold = x;
      x = box(gamma + u);
      u += gamma - x;
      if ((gamma - x).norm() <= 1e-14 * scale && rho * (x - xold).norm() <= 1e-14 * scale) break;
    }
  } else {
    x = x0;
  }
  // Active-set polish: fix bounds that the ADMM iterate sits on, re-solve the
  // equality QP exactly, and repair the set until the KKT conditions hold.
  std::vector<int> state(static_cast<std::size_t>(n), 0);
  const double at_tol = 1e-8 * (1.0 + x.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x(i) <= qp.lower(i) + at_tol) state[static_cast<std::size_t>(i)] = -1;
    else if (x(i) >= qp.upper(i) - at_tol) state[static_cast<std::size_t>(i)] = 1;
  }
  for (int round = 0; round < 4 * n + 10; ++round) {
    std::vector<Eigen::Index> act;
    for (Eigen::Index i = 0; i < n; ++i)
      if (state[static_cast<std::size_t>(i)] != 0) act.push_back(i);
    Eigen::MatrixXd C(qp.A.rows() + static_cast<Eigen::Index>(act.size()), n);
    Eigen::VectorXd c(C.rows());
    C.topRows(qp.A.rows()) = qp.A;
    c.head(qp.A.rows()) = qp.b;
    for (std::size_t a = 0; a < act.size(); ++a) {
      const auto r = qp.A.rows() + static_cast<Eigen::Index>(a);
      C.row(r).setZero();
      C(r, act[a]) = 1.0;
      c(r) = state[static_cast<std::size_t>(act[a])] < 0 ? qp.lower(act[a]) : qp.upper(act[a]);
    }
    const auto cand = equality_qp(qp.H, qp.g, C, c);
    if (!cand) break;
    if (kkt_ok(qp, *cand, state, 1e-10 * (1.0 + cand->cwiseAbs().maxCoeff()))) return *cand;
    // repair: add the most violated bound, otherwise release one bound
    Eigen::Index worst = -1;
    double viol = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = std::max(qp.lower(i) - (*cand)(i), (*cand)(i) - qp.upper(i));
      if (v > viol) viol = v, worst = i;
    }
    if (worst >= 0) {
      state[static_cast<std::size_t>(worst)] = (*cand)(worst) < qp.lower(worst) ? -1 : 1;
      continue;
    }
    bool released = false;
    for (Eigen::Index i = 0; i < n && !released; ++i)
      if (state[static_cast<std::size_t>(i)] != 0) {
        state[static_cast<std::size_t>(i)] = 0;
        released = true;
      }
    if (!released) break;
  }
  return x;
}

}  // namespace detail

/// Solves the calibration primal directly over the respondent cells:
///   min (1/2N) sum n gamma^2 + sum_k |E_k|^2 / (2 N^2 lambda_k)
///   s.t. exact balance on order 1 (and on orders with lambda = 0), L <= gamma <= U.
/// Dense; intended for at most 200 respondent cells.
inline WeightSolution brute_force_primal(const InteractionDesign& design, const CellTable& table,
                                         const CalibrationSpec& spec) {
  spec.validate(design);
  table.validate();
  std::vector<std::size_t> support;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) support.push_back(s);
  if (support.size() > 200) throw std::invalid_argument("brute_force_primal supports at most 200 respondent cells");
  if (support.empty()) throw InfeasibleError("no respondents");
  const double N = table.population_size();
  const auto m = static_cast<Eigen::Index>(support.size());
  const Eigen::MatrixXd D = design.dense();
  Eigen::VectorXd NP(D.rows());
  for (Eigen::Index s = 0; s < D.rows(); ++s) NP(s) = table.pop_counts[static_cast<std::size_t>(s)];
  Eigen::MatrixXd DS(m, D.cols());
  Eigen::VectorXd nS(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    DS.row(i) = D.row(static_cast<Eigen::Index>(support[static_cast<std::size_t>(i)]));
    nS(i) = table.resp_counts[support[static_cast<std::size_t>(i)]];
  }
  detail::EqualityQp qp;
  qp.H = Eigen::MatrixXd(nS.asDiagonal()) / N;
  qp.g = Eigen::VectorXd::Zero(m);
  std::vector<Eigen::Index> eq_cols;
  for (std::size_t k = 1; k <= spec.max_order; ++k) {
    const double l = spec.lambda_for(k);
    const auto lo = static_cast<Eigen::Index>(design.block_begin(k));
    const auto sz = static_cast<Eigen::Index>(design.block_size(k));
    if (k == 1 || l == 0.0) {
      for (Eigen::Index j = lo; j < lo + sz; ++j) eq_cols.push_back(j);
      continue;
    }
    if (!std::isfinite(l)) continue;
    const Eigen::MatrixXd B = nS.asDiagonal() * DS.middleCols(lo, sz);  // m x m_k
    const Eigen::VectorXd t = D.middleCols(lo, sz).transpose() * NP;
    const double w = 1.0 / (N * N * l);
    qp.H += w * B * B.transpose();
    qp.g -= w * B * t;
  }
  qp.A.resize(static_cast<Eigen::Index>(eq_cols.size()), m);
  qp.b.resize(qp.A.rows());
  for (std::size_t r = 0; r < eq_cols.size(); ++r) {
    const auto j = eq_cols[r];
    const auto rr = static_cast<Eigen::Index>(r);
    qp.A.row(rr) = (DS.col(j).cwiseProduct(nS)).transpose() / N;
    qp.b(rr) = D.col(j).dot(NP) / N;
  }
  qp.lower = Eigen::VectorXd::Constant(m, spec.bounds.lower);
  qp.upper = Eigen::VectorXd::Constant(m, spec.bounds.upper);
  const Eigen::VectorXd gam = detail::solve_box_equality_qp(qp);
  WeightSolution sol;
  sol.gamma.assign(table.num_cells(), 0.0);
  sol.support.assign(table.num_cells(), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    sol.gamma[support[static_cast<std::size_t>(i)]] = gam(i);
    sol.support[support[static_cast<std::size_t>(i)]] = 1;
  }
  fill_weight_diagnostics(sol, design, table, spec.bounds);
  sol.status = SolveStatus::converged;
  sol.dual.converged = true;
  return sol;
}

}  // namespace mlcal
