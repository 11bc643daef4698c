#pragma once

#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlcal/common.hpp"
#include "mlcal/design.hpp"

namespace mlcal {

struct Bounds {
  double lower = 0.0;
  double upper = kInf;
};

/// Hyperparameters of the multilevel calibration program. lambda[k-2] is the
/// penalty of order k; order 1 is always balanced exactly. lambda = 0 makes an
/// order exact, lambda = +inf drops it.
struct CalibrationSpec {
  std::size_t max_order = 1;
  std::vector<double> lambda;
  Bounds bounds;
  double balance_tol = 1e-8;
  double grad_tol = 1e-8;
  int max_iterations = 5000;

  double lambda_for(std::size_t k) const { return k <= 1 ? 0.0 : lambda.at(k - 2); }

  /// Highest order whose columns enter the dual.
  std::size_t effective_order() const {
    std::size_t k = 1;
    for (std::size_t j = 2; j <= max_order; ++j)
      if (std::isfinite(lambda_for(j))) k = j;
    return k;
  }

  static CalibrationSpec raking(Bounds b = {}) {
    CalibrationSpec s;
    s.bounds = b;
    return s;
  }

  static CalibrationSpec multilevel(std::size_t max_order, double lambda, Bounds b = {}) {
    CalibrationSpec s;
    s.max_order = max_order;
    s.lambda.assign(max_order > 1 ? max_order - 1 : 0, lambda);
    s.bounds = b;
    return s;
  }

  void validate(const InteractionDesign& design) const {
    if (max_order < 1) throw std::invalid_argument("max_order must be >= 1");
    if (max_order > design.max_order())
      throw std::invalid_argument("design built to order " + std::to_string(design.max_order()) +
                                  " but calibration needs order " + std::to_string(max_order));
    if (lambda.size() != max_order - 1)
      throw std::invalid_argument("expected " + std::to_string(max_order - 1) + " lambda values, got " +
                                  std::to_string(lambda.size()));
    for (double l : lambda)
      if (!(l >= 0)) throw std::invalid_argument("lambda must be nonnegative");
    if (std::isnan(bounds.lower) || std::isnan(bounds.upper) || !(bounds.upper > bounds.lower) ||
        bounds.lower == kInf || bounds.upper == -kInf)
      throw std::invalid_argument("bounds must satisfy L < U");
    if (!(balance_tol > 0) || !(grad_tol > 0) || max_iterations < 1)
      throw std::invalid_argument("tolerances must be positive");
  }
};

enum class SolveStatus { converged, not_converged, infeasible };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return "converged";
    case SolveStatus::not_converged: return "not_converged";
    case SolveStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct DualSolution {
  std::vector<double> beta;
  int iterations = 0;
  int newton_iterations = 0;
  double grad_norm = kInf;
  double balance_residual = kInf;
  double value = 0.0;
  bool converged = false;
  std::string message;
};

struct WeightSolution {
  std::vector<double> gamma;
  std::vector<char> support;
  DualSolution dual;
  std::vector<double> imbalance_by_order;
  double population_size = 0.0;
  double sum_sq_weights = 0.0;
  double weight_total = 0.0;
  double n_eff = 0.0;
  double balance_residual = 0.0;
  std::size_t num_at_lower = 0;
  std::size_t num_at_upper = 0;
  SolveStatus status = SolveStatus::not_converged;
  std::string message;
};

/// Lagrangian dual of the calibration program with clip(., L, U) link.
///   q(beta) = (1/N) sum_s n_s (c_s z_s - c_s^2/2) - (1/N) sum_s N_s z_s + sum_k lambda_k/2 |beta_k|^2
/// with z = D beta and c = clip(z, L, U). For L = 0, U = inf the per-cell term is c_s^2/2.
class DualProblem {
 public:
  DualProblem(const InteractionDesign& design, const CellTable& table, const CalibrationSpec& spec) : spec_(spec) {
    spec.validate(design);
    table.validate();
    if (table.num_cells() != design.num_rows()) throw SchemaError("design and cell table disagree on J");
    order_ = spec.effective_order();
    dim_ = design.block_end(spec.max_order);
    N_ = table.population_size();
    penalty_.assign(dim_, 0.0);
    free_.assign(dim_, 1);
    for (std::size_t k = 2; k <= spec.max_order; ++k) {
      const double l = spec.lambda_for(k);
      for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) {
        penalty_[j] = std::isfinite(l) ? l : 0.0;
        free_[j] = std::isfinite(l) ? 1 : 0;
      }
    }
    block1_end_ = design.block_end(1);
    row_ptr_.push_back(0);
    for (std::size_t s = 0; s < table.num_cells(); ++s) {
      if (!(table.resp_counts[s] > 0)) continue;
      support_.push_back(s);
      n_.push_back(table.resp_counts[s]);
      design.for_each_column(s, [&](std::size_t j) {
        if (free_[j]) cols_.push_back(static_cast<std::uint32_t>(j));
      }, order_);
      row_ptr_.push_back(cols_.size());
    }
    target_.assign(dim_, 0.0);
    for (std::size_t s = 0; s < table.num_cells(); ++s)
      if (table.pop_counts[s] > 0)
        design.for_each_column(s, [&](std::size_t j) { target_[j] += table.pop_counts[s] / N_; }, order_);
    for (std::size_t j = 0; j < dim_; ++j)
      if (!free_[j]) target_[j] = 0.0;
  }

  std::size_t dimension() const noexcept { return dim_; }
  std::size_t num_free() const noexcept { return static_cast<std::size_t>(std::count(free_.begin(), free_.end(), 1)); }
  std::span<const std::size_t> support() const noexcept { return support_; }
  std::span<const double> target() const noexcept { return target_; }
  std::span<const char> free_mask() const noexcept { return free_; }
  std::size_t block1_end() const noexcept { return block1_end_; }
  double population_size() const noexcept { return N_; }
  const CalibrationSpec& spec() const noexcept { return spec_; }

  double link(std::size_t i, std::span<const double> beta) const noexcept {
    double z = 0.0;
    for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) z += beta[cols_[p]];
    return z;
  }

  /// Returns q(beta) and writes its gradient.
  double value_grad(std::span<const double> beta, std::span<double> grad) const {
    const double L = spec_.bounds.lower, U = spec_.bounds.upper;
    for (std::size_t j = 0; j < dim_; ++j) grad[j] = penalty_[j] * beta[j] - target_[j];
    double v = 0.0;
    for (std::size_t i = 0; i < support_.size(); ++i) {
      const double z = link(i, beta);
      const double c = clip(z, L, U);
      v += n_[i] * (c * z - 0.5 * c * c);
      const double gc = n_[i] * c / N_;
      for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) grad[cols_[p]] += gc;
    }
    v /= N_;
    for (std::size_t j = 0; j < dim_; ++j) v += 0.5 * penalty_[j] * beta[j] * beta[j] - target_[j] * beta[j];
    return v;
  }

  /// Generalized Hessian restricted to free coordinates (cells strictly inside the box).
  Eigen::MatrixXd hessian(std::span<const double> beta, std::span<const std::size_t> free_index) const {
    const auto m = static_cast<Eigen::Index>(free_index.size());
    std::vector<Eigen::Index> pos(dim_, -1);
    for (std::size_t a = 0; a < free_index.size(); ++a) pos[free_index[a]] = static_cast<Eigen::Index>(a);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(m, m);
    const double L = spec_.bounds.lower, U = spec_.bounds.upper;
    for (std::size_t i = 0; i < support_.size(); ++i) {
      const double z = link(i, beta);
      if (!(z > L && z < U)) continue;
      const double w = n_[i] / N_;
      for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) {
        const auto a = pos[cols_[p]];
        for (std::size_t q = p; q < row_ptr_[i + 1]; ++q) {
          const auto b = pos[cols_[q]];
          H(std::max(a, b), std::min(a, b)) += w;
        }
      }
    }
    for (std::size_t a = 0; a < free_index.size(); ++a) H(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) += penalty_[free_index[a]];
    return H.selfadjointView<Eigen::Lower>();
  }

  double free_grad_norm(std::span<const double> grad) const noexcept {
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j)
      if (free_[j]) s += grad[j] * grad[j];
    return std::sqrt(s);
  }

  double block1_residual(std::span<const double> grad) const noexcept {
    double m = 0.0;
    for (std::size_t j = 0; j < block1_end_; ++j) m = std::max(m, std::abs(grad[j]));
    return m;
  }

 private:
  CalibrationSpec spec_;
  std::size_t order_ = 1;
  std::size_t dim_ = 0;
  std::size_t block1_end_ = 0;
  double N_ = 0.0;
  std::vector<std::size_t> support_;
  std::vector<double> n_;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> target_;
  std::vector<double> penalty_;
  std::vector<char> free_;
};

/// Value and gradient of the dual at beta (length design.block_end(spec.max_order)).
inline std::pair<double, std::vector<double>> dual_value_grad(std::span<const double> beta,
                                                               const InteractionDesign& design,
                                                               const CellTable& table, const CalibrationSpec& spec) {
  DualProblem prob(design, table, spec);
  if (beta.size() != prob.dimension()) throw std::invalid_argument("beta has wrong length");
  for (double b : beta)
    if (!std::isfinite(b)) throw std::invalid_argument("non-finite beta");
  std::vector<double> g(prob.dimension());
  const double v = prob.value_grad(beta, g);
  return {v, std::move(g)};
}

/// Necessary feasibility of the exact margins: every populated margin level
/// must hold respondents, and the box must be able to reach its total.
inline void check_margin_feasibility(const CellTable& table, const Bounds& bounds) {
  const auto& schema = table.schema;
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    std::vector<double> pop(schema.levels()[c], 0.0), resp(schema.levels()[c], 0.0);
    for (std::size_t s = 0; s < table.num_cells(); ++s) {
      const auto l = cell_level(schema, s, c);
      pop[l] += table.pop_counts[s];
      resp[l] += table.resp_counts[s];
    }
    for (std::size_t l = 0; l < pop.size(); ++l) {
      const std::string name = schema.covariate(c).name + "=" + schema.covariate(c).labels[l];
      const double tol = 1e-9 * std::max(1.0, pop[l]);
      if (pop[l] > 0 && resp[l] == 0) throw InfeasibleError("margin " + name + " has population but no respondents");
      if (std::isfinite(bounds.upper) && bounds.upper * resp[l] < pop[l] - tol)
        throw InfeasibleError("margin " + name + " cannot reach its population total under the upper bound");
      if (std::isfinite(bounds.lower) && bounds.lower * resp[l] > pop[l] + tol)
        throw InfeasibleError("margin " + name + " exceeds its population total at the lower bound");
    }
  }
}

struct DualSolverOptions {
  int memory = 20;
  std::size_t newton_dense_limit = 2500;
  int max_newton_iterations = 50;
};

namespace detail {

inline bool dual_converged(const DualProblem& prob, std::span<const double> g) {
  return prob.free_grad_norm(g) <= prob.spec().grad_tol && prob.block1_residual(g) <= prob.spec().balance_tol;
}

/// Semismooth Newton on the generalized Hessian. The ridge grows when a step
/// is rejected (Levenberg style) and shrinks again after a success.
inline int newton_polish(const DualProblem& prob, std::vector<double>& x, double& f, std::vector<double>& g,
                         int max_iter) {
  std::vector<std::size_t> free_index;
  for (std::size_t j = 0; j < prob.dimension(); ++j)
    if (prob.free_mask()[j]) free_index.push_back(j);
  const auto m = static_cast<Eigen::Index>(free_index.size());
  std::vector<double> xt(x.size()), gt(x.size());
  const double floor_tol = 1e-15 * (1.0 + norm2(prob.target()));
  double mu = 1e-12;
  int it = 0;
  for (; it < max_iter; ++it) {
    const double gnorm = prob.free_grad_norm(g);
    if (gnorm <= floor_tol) break;
    const Eigen::MatrixXd H = prob.hessian(x, free_index);
    const double hmax = std::max(1e-300, H.diagonal().maxCoeff());
    Eigen::VectorXd rhs(m);
    for (Eigen::Index a = 0; a < m; ++a) rhs(a) = -g[free_index[static_cast<std::size_t>(a)]];
    bool accepted = false;
    double ft = f;
    for (int attempt = 0; attempt < 10 && !accepted; ++attempt, mu *= 100) {
      Eigen::MatrixXd Hm = H;
      Hm.diagonal().array() += mu * hmax;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Hm);
      if (ldlt.info() != Eigen::Success) continue;
      const Eigen::VectorXd d = ldlt.solve(rhs);
      if (!d.allFinite()) continue;
      const double slope = -rhs.dot(d);
      if (!(slope < 0)) continue;
      double t = 1.0;
      for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
        xt = x;
        for (Eigen::Index a = 0; a < m; ++a) xt[free_index[static_cast<std::size_t>(a)]] += t * d(a);
        ft = prob.value_grad(xt, gt);
        // near the optimum f stops resolving progress; fall back on the gradient
        if (ft <= f + 1e-4 * t * slope ||
            (ft <= f + 1e-13 * (1.0 + std::abs(f)) && prob.free_grad_norm(gt) < 0.9 * gnorm)) {
          accepted = true;
          break;
        }
      }
      if (accepted) break;
    }
    if (!accepted) break;
    mu = std::max(1e-12, mu * 1e-2);
    const bool progress = prob.free_grad_norm(gt) < gnorm || ft < f;
    x.swap(xt);
    g.swap(gt);
    f = ft;
    if (!progress) break;
  }
  return it;
}

/// L-BFGS with Armijo backtracking; returns the number of iterations taken.
/// Sets `failure` when the line search breaks down or the dual diverges.
inline int lbfgs(const DualProblem& prob, std::vector<double>& x, double& f, std::vector<double>& g, int max_iter,
                 int memory, std::string& failure) {
  const std::size_t p = prob.dimension();
  std::vector<double> xn(p), gn(p), d(p);
  std::deque<std::vector<double>> S, Y;
  std::deque<double> rho;
  int it = 0;
  for (; it < max_iter; ++it) {
    if (dual_converged(prob, g)) break;
    // two-loop recursion
    for (std::size_t j = 0; j < p; ++j) d[j] = prob.free_mask()[j] ? -g[j] : 0.0;
    std::vector<double> alpha(S.size());
    for (std::size_t i = S.size(); i-- > 0;) {
      alpha[i] = rho[i] * dot(S[i], d);
      for (std::size_t j = 0; j < p; ++j) d[j] -= alpha[i] * Y[i][j];
    }
    if (!S.empty()) {
      const double scale = dot(S.back(), Y.back()) / dot(Y.back(), Y.back());
      for (auto& v : d) v *= scale;
    } else {
      const double gn0 = norm2(g);
      if (gn0 > 1.0)
        for (auto& v : d) v /= gn0;
    }
    for (std::size_t i = 0; i < S.size(); ++i) {
      const double b = rho[i] * dot(Y[i], d);
      for (std::size_t j = 0; j < p; ++j) d[j] += (alpha[i] - b) * S[i][j];
    }
    double slope = dot(g, d);
    if (!(slope < 0)) {
      S.clear(), Y.clear(), rho.clear();
      for (std::size_t j = 0; j < p; ++j) d[j] = prob.free_mask()[j] ? -g[j] : 0.0;
      slope = dot(g, d);
    }
    double t = 1.0, fn = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (std::size_t j = 0; j < p; ++j) xn[j] = x[j] + t * d[j];
      fn = prob.value_grad(xn, gn);
      if (std::isfinite(fn) && fn <= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      // quadratic interpolation, safeguarded
      double tn = std::isfinite(fn) ? -slope * t * t / (2.0 * (fn - f - slope * t)) : 0.1 * t;
      t = clip(tn, 0.1 * t, 0.5 * t);
    }
    if (!accepted) {
      if (!S.empty()) {
        S.clear(), Y.clear(), rho.clear();
        continue;
      }
      failure = "line search failed";
      break;
    }
    std::vector<double> s(p), y(p);
    for (std::size_t j = 0; j < p; ++j) {
      s[j] = xn[j] - x[j];
      y[j] = gn[j] - g[j];
    }
    const double sy = dot(s, y);
    if (sy > 1e-14 * norm2(s) * norm2(y)) {
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
      if (S.size() > static_cast<std::size_t>(memory)) S.pop_front(), Y.pop_front(), rho.pop_front();
    }
    x.swap(xn);
    g.swap(gn);
    f = fn;
    if (f < -1e14 || norm_inf(x) > 1e14) {
      failure = "dual unbounded below: calibration constraints are infeasible";
      break;
    }
  }
  return it;
}

}  // namespace detail

/// Minimizes the dual. Small problems alternate short L-BFGS phases with
/// semismooth Newton; larger ones run L-BFGS alone.
inline DualSolution solve_dual(const DualProblem& prob, std::span<const double> warm_start = {},
                               const DualSolverOptions& opts = {}) {
  const std::size_t p = prob.dimension();
  const auto& spec = prob.spec();
  std::vector<double> x(p, 0.0), g(p);
  if (!warm_start.empty()) {
    if (warm_start.size() != p) throw std::invalid_argument("warm start has wrong length");
    for (std::size_t j = 0; j < p; ++j) x[j] = prob.free_mask()[j] ? warm_start[j] : 0.0;
  }
  double f = prob.value_grad(x, g);
  DualSolution out;
  std::string failure;
  const bool newton = prob.num_free() <= opts.newton_dense_limit && opts.max_newton_iterations > 0;
  int budget = spec.max_iterations;
  const int phase = newton ? std::min(budget, 100) : budget;
  while (budget > 0 && failure.empty()) {
    const int used = detail::lbfgs(prob, x, f, g, std::min(phase, budget), opts.memory, failure);
    out.iterations += used;
    budget -= std::max(used, 1);
    if (!failure.empty() || !newton) break;
    out.newton_iterations += detail::newton_polish(prob, x, f, g, opts.max_newton_iterations);
    if (detail::dual_converged(prob, g)) break;
  }
  if (newton && failure.empty() && !detail::dual_converged(prob, g))
    out.newton_iterations += detail::newton_polish(prob, x, f, g, opts.max_newton_iterations);
  out.converged = detail::dual_converged(prob, g);
  if (!out.converged) out.message = failure.empty() ? "iteration budget exhausted" : failure;
  out.grad_norm = prob.free_grad_norm(g);
  out.balance_residual = prob.block1_residual(g);
  out.value = f;
  out.beta = std::move(x);
  return out;
}

inline DualSolution solve_dual(const InteractionDesign& design, const CellTable& table, const CalibrationSpec& spec,
                               std::span<const double> warm_start = {}) {
  return solve_dual(DualProblem(design, table, spec), warm_start);
}

/// D^T (diag(n) gamma - N^P) for every design column.
inline std::vector<double> imbalance_vector(const InteractionDesign& design, const CellTable& table,
                                            std::span<const double> gamma) {
  std::vector<double> v(table.num_cells());
  for (std::size_t s = 0; s < v.size(); ++s) v[s] = table.resp_counts[s] * gamma[s] - table.pop_counts[s];
  return design.transpose_times(v);
}

/// Fills weight diagnostics for weights already stored in sol.gamma / sol.support.
inline void fill_weight_diagnostics(WeightSolution& sol, const InteractionDesign& design, const CellTable& table,
                                    const Bounds& bounds) {
  sol.population_size = table.population_size();
  CompensatedSum total, sq;
  sol.num_at_lower = sol.num_at_upper = 0;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!sol.support[s]) continue;
    total.add(table.resp_counts[s] * sol.gamma[s]);
    sq.add(table.resp_counts[s] * sol.gamma[s] * sol.gamma[s]);
    if (sol.gamma[s] <= bounds.lower) ++sol.num_at_lower;
    if (sol.gamma[s] >= bounds.upper) ++sol.num_at_upper;
  }
  sol.weight_total = total.value();
  sol.sum_sq_weights = sq.value();
  sol.n_eff = sol.sum_sq_weights > 0 ? sol.weight_total * sol.weight_total / sol.sum_sq_weights : 0.0;
  const auto imb = imbalance_vector(design, table, sol.gamma);
  sol.imbalance_by_order.assign(design.max_order(), 0.0);
  for (std::size_t k = 1; k <= design.max_order(); ++k) {
    double ss = 0.0;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) ss += imb[j] * imb[j];
    sol.imbalance_by_order[k - 1] = std::sqrt(ss);
  }
  double r = 0.0;
  for (std::size_t j = 0; j < design.block_end(1); ++j) r = std::max(r, std::abs(imb[j]));
  sol.balance_residual = r / sol.population_size;
}

/// gamma(s) = clip(D_s beta, L, U) on cells with respondents.
inline WeightSolution recover_primal(DualSolution dual, const InteractionDesign& design, const CellTable& table,
                                     const CalibrationSpec& spec) {
  WeightSolution sol;
  const std::size_t order = spec.effective_order();
  sol.gamma.assign(table.num_cells(), 0.0);
  sol.support.assign(table.num_cells(), 0);
  std::vector<char> free(dual.beta.size(), 1);
  for (std::size_t k = 2; k <= spec.max_order; ++k)
    if (!std::isfinite(spec.lambda_for(k)))
      for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) free[j] = 0;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!(table.resp_counts[s] > 0)) continue;
    sol.support[s] = 1;
    double z = 0.0;
    design.for_each_column(s, [&](std::size_t j) {
      if (free[j]) z += dual.beta[j];
    }, order);
    sol.gamma[s] = clip(z, spec.bounds.lower, spec.bounds.upper);
  }
  fill_weight_diagnostics(sol, design, table, spec.bounds);
  const bool balanced = sol.balance_residual <= spec.balance_tol;
  sol.status = dual.converged && balanced ? SolveStatus::converged : SolveStatus::not_converged;
  if (dual.message.find("infeasible") != std::string::npos) sol.status = SolveStatus::infeasible;
  sol.message = sol.status == SolveStatus::converged ? "" : (dual.message.empty() ? "margins not balanced" : dual.message);
  sol.dual = std::move(dual);
  return sol;
}

/// Feasibility check, dual solve and primal recovery in one call.
inline WeightSolution calibrate(const InteractionDesign& design, const CellTable& table, const CalibrationSpec& spec,
                                std::span<const double> warm_start = {}) {
  spec.validate(design);
  check_margin_feasibility(table, spec.bounds);
  DualProblem prob(design, table, spec);
  auto dual = solve_dual(prob, warm_start);
  return recover_primal(std::move(dual), design, table, spec);
}

/// Primal objective on the dual's scale:
///   (1/2N) sum_s n_s gamma_s^2 + sum_{k>=2} |E_k|^2 / (2 N^2 lambda_k)
/// with E_k = D^(k)T (diag(n) gamma - N^P); exact and dropped orders contribute nothing.
inline double primal_objective(std::span<const double> gamma, const InteractionDesign& design,
                               const CellTable& table, const CalibrationSpec& spec) {
  const double N = table.population_size();
  CompensatedSum obj;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) obj.add(table.resp_counts[s] * gamma[s] * gamma[s] / (2 * N));
  const auto imb = imbalance_vector(design, table, gamma);
  for (std::size_t k = 2; k <= spec.max_order; ++k) {
    const double l = spec.lambda_for(k);
    if (!(l > 0) || !std::isfinite(l)) continue;
    double ss = 0.0;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) ss += imb[j] * imb[j];
    obj.add(ss / (2 * N * N * l));
  }
  return obj.value();
}

struct OrderStationarity {
  std::size_t order = 0;
  double scaled_imbalance = 0.0;  // (1/N) |E_k|_2
  double lambda_beta = 0.0;       // lambda_k |beta_k|_2
  double difference = 0.0;
};

struct KktReport {
  std::vector<OrderStationarity> orders;
  double primal_objective = 0.0;
  double dual_objective = 0.0;  // -q(beta)
  double duality_gap = 0.0;
  double max_stationarity_gap = 0.0;
};

inline KktReport kkt_report(const WeightSolution& sol, const InteractionDesign& design, const CellTable& table,
                            const CalibrationSpec& spec) {
  KktReport r;
  const double N = table.population_size();
  const auto imb = imbalance_vector(design, table, sol.gamma);
  for (std::size_t k = 2; k <= spec.max_order; ++k) {
    OrderStationarity o;
    o.order = k;
    const double l = spec.lambda_for(k);
    double ss = 0.0, bb = 0.0;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) {
      ss += imb[j] * imb[j];
      if (j < sol.dual.beta.size()) bb += sol.dual.beta[j] * sol.dual.beta[j];
    }
    o.scaled_imbalance = std::sqrt(ss) / N;
    o.lambda_beta = std::isfinite(l) ? l * std::sqrt(bb) : 0.0;
    o.difference = std::isfinite(l) ? std::abs(o.scaled_imbalance - o.lambda_beta) : 0.0;
    r.max_stationarity_gap = std::max(r.max_stationarity_gap, o.difference);
    r.orders.push_back(o);
  }
  r.primal_objective = primal_objective(sol.gamma, design, table, spec);
  if (!sol.dual.beta.empty()) {
    auto [q, g] = dual_value_grad(sol.dual.beta, design, table, spec);
    r.dual_objective = -q;
  }
  r.duality_gap = r.primal_objective - r.dual_objective;
  return r;
}

/// Box-constrained least-squares balance on all orders of `design`:
///   min_gamma |D^T (diag(n) gamma - N^P)|^2  s.t. lower <= gamma <= upper,
/// solved by accelerated projected gradient with adaptive restart.
inline WeightSolution solve_unregularized(const InteractionDesign& design, const CellTable& table, double lower = 0.0,
                                          double upper = 1.0, int max_iterations = 200000, double tol = 1e-11) {
  table.validate();
  const std::size_t J = table.num_cells();
  const double N = table.population_size();
  std::vector<std::size_t> support;
  for (std::size_t s = 0; s < J; ++s)
    if (table.resp_counts[s] > 0) support.push_back(s);
  const auto target = design.transpose_times(table.pop_counts);
  // residual r = D^T(n gamma) - D^T N^P ; grad_s = 2 n_s (D r)_s / N^2
  auto residual = [&](std::span<const double> gamma) {
    std::vector<double> r(design.num_columns(), 0.0);
    for (auto s : support) design.add_row(s, table.resp_counts[s] * gamma[s], r);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= target[j];
    return r;
  };
  auto gradient = [&](std::span<const double> r, std::vector<double>& g) {
    for (auto s : support) g[s] = 2.0 * table.resp_counts[s] * design.row_dot(s, r) / (N * N);
  };
  // Lipschitz constant via power iteration on diag(n) D D^T diag(n)
  std::vector<double> v(J, 0.0), w(J, 0.0);
  for (auto s : support) v[s] = 1.0;
  double lip = 0.0;
  for (int it = 0; it < 100; ++it) {
    const double nv = norm2(v);
    if (nv == 0) break;
    for (auto& x : v) x /= nv;
    std::vector<double> r(design.num_columns(), 0.0);
    for (auto s : support) design.add_row(s, table.resp_counts[s] * v[s], r);
    for (auto s : support) w[s] = table.resp_counts[s] * design.row_dot(s, r);
    const double est = dot(v, w);
    if (std::abs(est - lip) <= 1e-10 * est) {
      lip = est;
      break;
    }
    lip = est;
    v = w;
  }
  const double step = 1.0 / (1.05 * 2.0 * lip / (N * N) + 1e-300);
  auto project = [&](double x) { return clip(x, lower, upper); };
  std::vector<double> x(J, 0.0), y(J, 0.0), xo(J, 0.0), g(J, 0.0);
  for (auto s : support) x[s] = y[s] = project(1.0);
  auto objective = [&](std::span<const double> r) { return dot(r, r) / (N * N); };
  double tk = 1.0;
  double f_prev = objective(residual(x));
  int it = 0;
  for (; it < max_iterations; ++it) {
    const auto ry = residual(y);
    gradient(ry, g);
    xo = x;
    double move = 0.0;
    for (auto s : support) {
      x[s] = project(y[s] - step * g[s]);
      move = std::max(move, std::abs(x[s] - xo[s]));
    }
    const double f = objective(residual(x));
    if (f > f_prev) {  // adaptive restart
      tk = 1.0;
      y = x;
    } else {
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      for (auto s : support) y[s] = x[s] + (tk - 1.0) / tn * (x[s] - xo[s]);
      tk = tn;
    }
    f_prev = f;
    if (move <= tol) break;
  }
  WeightSolution sol;
  sol.gamma = x;
  sol.support.assign(J, 0);
  for (auto s : support) sol.support[s] = 1;
  sol.dual.iterations = it;
  sol.dual.converged = it < max_iterations;
  sol.dual.value = f_prev;
  fill_weight_diagnostics(sol, design, table, Bounds{lower, upper});
  sol.status = sol.dual.converged ? SolveStatus::converged : SolveStatus::not_converged;
  if (sol.num_at_upper > 0)
    sol.message = "upper bound active on " + std::to_string(sol.num_at_upper) + " cells";
  return sol;
}

}  // namespace mlcal
