#pragma once

// Cell-level outcome models: penalized and MAP linear fits on interaction
// features, smoother matrices over cells, and bagged one-vs-rest trees.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlcal/common.hpp"
#include "mlcal/design.hpp"

namespace mlcal {

enum class OutcomeKind { constant, ridge, map_linear, smoother, bagged_trees };

inline const char* to_string(OutcomeKind k) {
  switch (k) {
    case OutcomeKind::constant: return "constant";
    case OutcomeKind::ridge: return "ridge";
    case OutcomeKind::map_linear: return "map_linear";
    case OutcomeKind::smoother: return "smoother";
    case OutcomeKind::bagged_trees: return "bagged_trees";
  }
  return "?";
}

/// Block-diagonal prior precision over design columns: q[k-1] * I on order k.
struct PriorCovariance {
  std::vector<double> q;

  static PriorCovariance ridge(std::size_t order, double penalty) {
    PriorCovariance p;
    p.q.assign(order, penalty);
    p.q[0] = 0.0;
    return p;
  }
};

/// Sparse smoother matrix; rows[s] lists (s', W(s, s')).
struct CellSmoother {
  std::vector<std::vector<std::pair<std::size_t, double>>> rows;
};

/// One-vs-rest regression tree. Internal nodes send cells whose level of
/// `covariate` equals `level` to `left`, everything else to `right`.
struct TreeNode {
  int covariate = -1;
  std::size_t level = 0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  double weight = 0.0;
};

struct Tree {
  std::vector<TreeNode> nodes;

  int leaf_of(const CovariateSchema& schema, std::size_t cell) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].covariate >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(i)];
      i = cell_level(schema, cell, static_cast<std::size_t>(n.covariate)) == n.level ? n.left : n.right;
    }
    return i;
  }
  double predict(const CovariateSchema& schema, std::size_t cell) const {
    return nodes[static_cast<std::size_t>(leaf_of(schema, cell))].value;
  }
};

struct CrossValidation {
  std::uint64_t seed = 0;
  std::size_t folds = 0;
  std::vector<double> grid;
  std::vector<double> loss;
  double selected = 0.0;
};

/// Fitted outcome model. `predictions` holds mu_hat for every cell; NaN
/// marks cells the model cannot predict (only possible for smoothers).
struct OutcomeModel {
  OutcomeKind kind = OutcomeKind::constant;
  std::size_t order = 0;
  double penalty = 0.0;
  PriorCovariance prior;
  std::vector<double> coefficients;
  std::vector<Tree> trees;
  std::size_t num_trees = 0;
  std::size_t depth = 0;
  std::uint64_t seed = 0;
  std::optional<CrossValidation> cv;
  std::vector<double> predictions;

  double predict(std::size_t s) const { return predictions.at(s); }
  bool defined(std::size_t s) const { return !std::isnan(predictions.at(s)); }
};

inline OutcomeModel constant_model(const CellTable& table, std::optional<double> value = std::nullopt) {
  OutcomeModel m;
  m.kind = OutcomeKind::constant;
  double c = 0.0;
  if (value) {
    c = *value;
  } else {
    if (!table.has_outcomes()) throw std::invalid_argument("constant model needs outcomes or an explicit value");
    CompensatedSum ys;
    for (double v : *table.resp_sums) ys.add(v);
    c = ys.value() / table.respondent_size();
  }
  m.coefficients = {c};
  m.predictions.assign(table.num_cells(), c);
  return m;
}

namespace detail {

inline void require_outcomes(const CellTable& table) {
  if (!table.has_outcomes()) throw std::invalid_argument("outcome model needs respondent outcomes");
}

/// Penalized weighted least squares over respondent cells:
///   (D' diag(w) D + diag(pen)) eta = D' diag(w) y, columns of order <= K.
/// Dense LDLT for moderate widths, Jacobi-preconditioned CG otherwise.
class LinearSystem {
 public:
  LinearSystem(const InteractionDesign& design, std::size_t order, std::vector<std::size_t> cells,
               std::vector<double> w, std::vector<double> pen, std::size_t dense_limit = 1500)
      : design_(design), order_(order), cells_(std::move(cells)), w_(std::move(w)), pen_(std::move(pen)) {
    p_ = design.block_end(order);
    for (std::size_t c = 0; c < cells_.size(); ++c) rows_.push_back(design.row_columns(cells_[c], order));
    diag_.assign(p_, 0.0);
    for (std::size_t c = 0; c < cells_.size(); ++c)
      for (auto j : rows_[c]) diag_[j] += w_[c];
    for (std::size_t j = 0; j < p_; ++j) {
      diag_[j] += pen_[j];
      if (!(diag_[j] > 0))
        throw std::invalid_argument("singular normal equations: column '" + design.column_label(j) +
                                    "' has no respondents; use a positive penalty or a lower order");
    }
    if (p_ <= dense_limit) {
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p_), static_cast<Eigen::Index>(p_));
      for (std::size_t c = 0; c < cells_.size(); ++c)
        for (auto i : rows_[c])
          for (auto j : rows_[c]) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += w_[c];
      for (std::size_t j = 0; j < p_; ++j) A(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) += pen_[j];
      ldlt_.compute(A);
      const auto& D = ldlt_.vectorD();
      if (ldlt_.info() != Eigen::Success || D.minCoeff() <= 1e-11 * D.cwiseAbs().maxCoeff())
        throw std::invalid_argument("singular normal equations; use a positive ridge penalty");
      dense_ = true;
    }
  }

  std::size_t dimension() const noexcept { return p_; }

  std::vector<double> apply(std::span<const double> v) const {
    std::vector<double> out(p_, 0.0);
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      double z = 0.0;
      for (auto j : rows_[c]) z += v[j];
      z *= w_[c];
      for (auto j : rows_[c]) out[j] += z;
    }
    for (std::size_t j = 0; j < p_; ++j) out[j] += pen_[j] * v[j];
    return out;
  }

  std::vector<double> solve(std::span<const double> rhs) const {
    if (dense_) {
      Eigen::Map<const Eigen::VectorXd> b(rhs.data(), static_cast<Eigen::Index>(p_));
      Eigen::VectorXd x = ldlt_.solve(b);
      // one step of iterative refinement
      const auto r = apply(std::span<const double>(x.data(), p_));
      Eigen::VectorXd res(static_cast<Eigen::Index>(p_));
      for (std::size_t j = 0; j < p_; ++j) res(static_cast<Eigen::Index>(j)) = rhs[j] - r[j];
      x += ldlt_.solve(res);
      return std::vector<double>(x.data(), x.data() + p_);
    }
    return pcg(rhs);
  }

  /// Scores D_s . eta for rhs built as D' diag(w) y.
  std::vector<double> rhs_from(std::span<const double> y) const {
    std::vector<double> b(p_, 0.0);
    for (std::size_t c = 0; c < cells_.size(); ++c)
      for (auto j : rows_[c]) b[j] += w_[c] * y[c];
    return b;
  }

 private:
  std::vector<double> pcg(std::span<const double> b) const {
    std::vector<double> x(p_, 0.0), r(b.begin(), b.end()), z(p_), d(p_);
    const double bnorm = norm2(b);
    if (bnorm == 0) return x;
    for (std::size_t j = 0; j < p_; ++j) d[j] = z[j] = r[j] / diag_[j];
    double rz = dot(r, z);
    for (std::size_t it = 0; it < 20 * p_ + 100; ++it) {
      const auto Ad = apply(d);
      const double a = rz / dot(d, Ad);
      for (std::size_t j = 0; j < p_; ++j) {
        x[j] += a * d[j];
        r[j] -= a * Ad[j];
      }
      if (norm2(r) <= 1e-14 * bnorm) break;
      for (std::size_t j = 0; j < p_; ++j) z[j] = r[j] / diag_[j];
      const double rz_new = dot(r, z);
      const double beta = rz_new / rz;
      rz = rz_new;
      for (std::size_t j = 0; j < p_; ++j) d[j] = z[j] + beta * d[j];
    }
    // refresh the residual to guard against drift
    const auto Ax = apply(x);
    for (std::size_t j = 0; j < p_; ++j) r[j] = b[j] - Ax[j];
    if (norm2(r) > 1e-8 * bnorm) throw std::runtime_error("conjugate gradient did not converge; system may be singular");
    return x;
  }

  const InteractionDesign& design_;
  std::size_t order_;
  std::vector<std::size_t> cells_;
  std::vector<double> w_;
  std::vector<double> pen_;
  std::vector<std::vector<std::size_t>> rows_;
  std::vector<double> diag_;
  std::size_t p_ = 0;
  bool dense_ = false;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

inline std::vector<double> column_penalties(const InteractionDesign& design, std::size_t order,
                                            std::span<const double> q) {
  std::vector<double> pen(design.block_end(order), 0.0);
  for (std::size_t k = 1; k <= order; ++k)
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) pen[j] = q[k - 1];
  return pen;
}

inline std::vector<std::size_t> respondent_cells(const CellTable& table) {
  std::vector<std::size_t> cells;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) cells.push_back(s);
  return cells;
}

inline OutcomeModel fit_linear(const InteractionDesign& design, const CellTable& table, std::size_t order,
                               const PriorCovariance& prior, OutcomeKind kind) {
  require_outcomes(table);
  if (order < 1 || order > design.max_order()) throw std::invalid_argument("outcome model order out of range");
  if (prior.q.size() < order) throw std::invalid_argument("prior needs one scale per order");
  for (double v : prior.q)
    if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("prior scales must be finite and nonnegative");
  const auto cells = respondent_cells(table);
  std::vector<double> w, y;
  for (auto s : cells) {
    w.push_back(table.resp_counts[s]);
    y.push_back(table.cell_mean(s));
  }
  LinearSystem sys(design, order, cells, w, column_penalties(design, order, prior.q));
  OutcomeModel m;
  m.kind = kind;
  m.order = order;
  m.prior = prior;
  m.prior.q.resize(order);
  m.coefficients = sys.solve(sys.rhs_from(y));
  m.predictions.resize(table.num_cells());
  for (std::size_t s = 0; s < table.num_cells(); ++s) m.predictions[s] = design.row_dot(s, m.coefficients, order);
  return m;
}

}  // namespace detail

/// Ridge on interaction features of order <= K; intercept and margins unpenalized.
inline OutcomeModel fit_ridge(const InteractionDesign& design, const CellTable& table, std::size_t order,
                              double penalty) {
  if (!(penalty >= 0)) throw std::invalid_argument("ridge penalty must be nonnegative");
  auto m = detail::fit_linear(design, table, order, PriorCovariance::ridge(order, penalty), OutcomeKind::ridge);
  m.penalty = penalty;
  return m;
}

/// MAP estimate of the multilevel linear model with prior precision Q.
inline OutcomeModel fit_map_linear(const InteractionDesign& design, const CellTable& table,
                                   const PriorCovariance& prior) {
  return detail::fit_linear(design, table, prior.q.size(), prior, OutcomeKind::map_linear);
}

/// Gradient of the ridge objective at the fitted coefficients (normal-equation residual).
inline std::vector<double> ridge_gradient(const OutcomeModel& m, const InteractionDesign& design,
                                          const CellTable& table) {
  std::vector<double> g(design.block_end(m.order), 0.0);
  const auto pen = detail::column_penalties(design, m.order, m.prior.q);
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!(table.resp_counts[s] > 0)) continue;
    const double r = table.resp_counts[s] * (design.row_dot(s, m.coefficients, m.order) - table.cell_mean(s));
    design.add_row(s, 2 * r, g, m.order);
  }
  for (std::size_t j = 0; j < g.size(); ++j) g[j] += 2 * pen[j] * m.coefficients[j];
  return g;
}

/// 5-fold (by default) cross-validation of the ridge penalty over respondent cells.
inline OutcomeModel fit_ridge_cv(const InteractionDesign& design, const CellTable& table, std::size_t order,
                                 std::vector<double> grid = {}, std::size_t folds = 5, std::uint64_t seed = 1) {
  detail::require_outcomes(table);
  if (grid.empty())
    for (int e = -2; e <= 4; ++e) grid.push_back(std::pow(10.0, e));
  auto cells = detail::respondent_cells(table);
  if (cells.size() < folds) throw std::invalid_argument("too few respondent cells for cross-validation");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(cells.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> fold_of(cells.size());
  for (std::size_t i = 0; i < perm.size(); ++i) fold_of[perm[i]] = i % folds;
  CrossValidation cv{seed, folds, grid, std::vector<double>(grid.size(), 0.0), 0.0};
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    CompensatedSum loss;
    for (std::size_t f = 0; f < folds; ++f) {
      std::vector<std::size_t> train;
      std::vector<double> w, y;
      for (std::size_t c = 0; c < cells.size(); ++c)
        if (fold_of[c] != f) {
          train.push_back(cells[c]);
          w.push_back(table.resp_counts[cells[c]]);
          y.push_back(table.cell_mean(cells[c]));
        }
      // margins held out of every training cell get a small ridge so the fold stays solvable
      auto pen = detail::column_penalties(design, order, PriorCovariance::ridge(order, grid[gi]).q);
      for (std::size_t j = 0; j < design.block_end(1); ++j) pen[j] = 1e-8;
      detail::LinearSystem sys(design, order, train, w, pen);
      const auto eta = sys.solve(sys.rhs_from(y));
      for (std::size_t c = 0; c < cells.size(); ++c)
        if (fold_of[c] == f) {
          const double r = design.row_dot(cells[c], eta, order) - table.cell_mean(cells[c]);
          loss.add(table.resp_counts[cells[c]] * r * r);
        }
    }
    cv.loss[gi] = loss.value();
  }
  std::size_t best = 0;
  for (std::size_t gi = 1; gi < grid.size(); ++gi)
    if (cv.loss[gi] < cv.loss[best]) best = gi;
  cv.selected = grid[best];
  auto m = fit_ridge(design, table, order, cv.selected);
  m.cv = std::move(cv);
  return m;
}

/// gamma_tilde(s) = gamma(s) + D_s (D' diag(n) D + Q)^{-1} D' (N^P - diag(n) gamma).
/// Weighting with gamma_tilde reproduces the DRP estimate of the MAP model.
inline std::vector<double> adjusted_weights(const OutcomeModel& model, std::span<const double> gamma,
                                            const InteractionDesign& design, const CellTable& table) {
  if (model.kind != OutcomeKind::map_linear && model.kind != OutcomeKind::ridge)
    throw std::invalid_argument("adjusted weights need a linear MAP model");
  if (gamma.size() != table.num_cells()) throw std::invalid_argument("weight vector length does not match cells");
  const auto cells = detail::respondent_cells(table);
  std::vector<double> w;
  for (auto s : cells) w.push_back(table.resp_counts[s]);
  detail::LinearSystem sys(design, model.order, cells, w, detail::column_penalties(design, model.order, model.prior.q));
  std::vector<double> gap(table.num_cells());
  for (std::size_t s = 0; s < gap.size(); ++s)
    gap[s] = table.pop_counts[s] - table.resp_counts[s] * (table.resp_counts[s] > 0 ? gamma[s] : 0.0);
  const auto v = sys.solve(design.transpose_times(gap, model.order));
  std::vector<double> out(table.num_cells(), 0.0);
  for (auto s : cells) out[s] = gamma[s] + design.row_dot(s, v, model.order);
  return out;
}

// ---------------------------------------------------------------- smoothers

inline CellSmoother diagonal_smoother(const CellTable& table) {
  CellSmoother W;
  W.rows.resize(table.num_cells());
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) W.rows[s].push_back({s, 1.0 / table.resp_counts[s]});
  return W;
}

inline CellSmoother uniform_smoother(const CellTable& table) {
  CellSmoother W;
  W.rows.resize(table.num_cells());
  const double n = table.respondent_size();
  std::vector<std::pair<std::size_t, double>> row;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) row.push_back({s, 1.0 / n});
  for (auto& r : W.rows) r = row;
  return W;
}

/// mu_hat(s) = sum_s' W(s, s') n_s' Ybar_s'. Rows with no respondent mass give NaN.
inline OutcomeModel smoother_predict(const CellSmoother& W, const CellTable& table) {
  detail::require_outcomes(table);
  if (W.rows.size() != table.num_cells()) throw std::invalid_argument("smoother has wrong number of rows");
  OutcomeModel m;
  m.kind = OutcomeKind::smoother;
  m.predictions.assign(table.num_cells(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    CompensatedSum acc;
    double mass = 0.0;
    for (auto [sp, w] : W.rows[s]) {
      if (!(table.resp_counts[sp] > 0)) continue;
      acc.add(w * (*table.resp_sums)[sp]);
      mass += std::abs(w) * table.resp_counts[sp];
    }
    if (mass > 0) m.predictions[s] = acc.value();
  }
  return m;
}

/// gamma_tilde(s') = gamma(s') + sum_s W(s, s') (N^P_s - n_s gamma(s)).
inline std::vector<double> smoother_adjusted_weights(const CellSmoother& W, std::span<const double> gamma,
                                                     const CellTable& table) {
  std::vector<double> out(table.num_cells(), 0.0);
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) out[s] = gamma[s];
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double gap = table.pop_counts[s] - (table.resp_counts[s] > 0 ? table.resp_counts[s] * gamma[s] : 0.0);
    if (gap == 0) continue;
    for (auto [sp, w] : W.rows[s])
      if (table.resp_counts[sp] > 0) out[sp] += w * gap;
  }
  return out;
}

// ---------------------------------------------------------------- trees

struct TreeOptions {
  std::size_t num_trees = 50;
  std::size_t depth = 4;
  std::uint64_t seed = 1;
  double min_leaf_weight = 1.0;
  bool bootstrap = true;
};

namespace detail {

/// Per-covariate rank of each level in the sorted order of its labels.
inline std::vector<std::vector<std::size_t>> canonical_ranks(const CovariateSchema& schema) {
  std::vector<std::vector<std::size_t>> rank(schema.num_covariates());
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    const auto& labels = schema.covariate(c).labels;
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
    rank[c].resize(labels.size());
    for (std::size_t r = 0; r < order.size(); ++r) rank[c][order[r]] = r;
  }
  return rank;
}

/// Cells sorted by their canonical level ranks, so fits do not depend on how
/// levels happen to be numbered.
inline std::vector<std::size_t> canonical_cell_order(const CovariateSchema& schema, std::vector<std::size_t> cells) {
  const auto rank = canonical_ranks(schema);
  auto key = [&](std::size_t s) {
    std::vector<std::size_t> k(schema.num_covariates());
    for (std::size_t c = 0; c < k.size(); ++c) k[c] = rank[c][cell_level(schema, s, c)];
    return k;
  };
  std::vector<std::pair<std::vector<std::size_t>, std::size_t>> keyed;
  for (auto s : cells) keyed.push_back({key(s), s});
  std::sort(keyed.begin(), keyed.end());
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = keyed[i].second;
  return cells;
}

struct TreeData {
  const CovariateSchema* schema = nullptr;
  std::vector<std::size_t> cells;   // canonical order
  std::vector<double> weight;       // fit weight per cell (full data)
  std::vector<double> target;       // per-cell target
  std::vector<std::vector<std::size_t>> level_order;  // per covariate: levels in canonical order
};

inline void grow(const TreeData& data, std::span<const double> boot, std::vector<std::size_t> idx, std::size_t depth,
                 double min_leaf, Tree& tree, int node) {
  CompensatedSum fw, fy;
  double bw = 0.0, by = 0.0;
  for (auto i : idx) {
    fw.add(data.weight[i]);
    fy.add(data.weight[i] * data.target[i]);
    bw += boot[i];
    by += boot[i] * data.target[i];
  }
  auto& nd = tree.nodes[static_cast<std::size_t>(node)];
  nd.weight = fw.value();
  nd.value = fw.value() > 0 ? fy.value() / fw.value() : 0.0;
  if (depth == 0 || bw < 2 * min_leaf) return;
  const auto& schema = *data.schema;
  double best_gain = 1e-12 * (1.0 + std::abs(by * by / bw));
  int best_cov = -1;
  std::size_t best_level = 0;
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    const std::size_t L = schema.levels()[c];
    std::vector<double> lw(L, 0.0), ly(L, 0.0);
    for (auto i : idx) {
      const auto l = cell_level(schema, data.cells[i], c);
      lw[l] += boot[i];
      ly[l] += boot[i] * data.target[i];
    }
    for (auto l : data.level_order[c]) {
      const double wl = lw[l], wr = bw - wl;
      if (wl < min_leaf || wr < min_leaf) continue;
      const double yl = ly[l], yr = by - yl;
      const double gain = yl * yl / wl + yr * yr / wr - by * by / bw;
      if (gain > best_gain) {
        best_gain = gain;
        best_cov = static_cast<int>(c);
        best_level = l;
      }
    }
  }
  if (best_cov < 0) return;
  std::vector<std::size_t> left, right;
  for (auto i : idx)
    (cell_level(schema, data.cells[i], static_cast<std::size_t>(best_cov)) == best_level ? left : right).push_back(i);
  const int li = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  tree.nodes.emplace_back();
  auto& parent = tree.nodes[static_cast<std::size_t>(node)];
  parent.covariate = best_cov;
  parent.level = best_level;
  parent.left = li;
  parent.right = li + 1;
  // drop cells absent from this bootstrap side only for split search; leaf values use full data
  grow(data, boot, std::move(left), depth - 1, min_leaf, tree, li);
  grow(data, boot, std::move(right), depth - 1, min_leaf, tree, li + 1);
}

}  // namespace detail

/// Bagged regression trees on cell summaries: cell s carries weight w_s and
/// target y_s. Splits are chosen on a bootstrap resample of units; leaf
/// values are weighted means over the full data.
inline std::vector<Tree> fit_tree_ensemble(const CovariateSchema& schema, std::span<const std::size_t> cells,
                                           std::span<const double> weight, std::span<const double> target,
                                           const TreeOptions& opt) {
  if (opt.num_trees < 1) throw std::invalid_argument("need at least one tree");
  detail::TreeData data;
  data.schema = &schema;
  std::vector<std::size_t> pos(schema.num_cells(), static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < cells.size(); ++i) pos[cells[i]] = i;
  data.cells = detail::canonical_cell_order(schema, std::vector<std::size_t>(cells.begin(), cells.end()));
  for (auto s : data.cells) {
    data.weight.push_back(weight[pos[s]]);
    data.target.push_back(target[pos[s]]);
  }
  const auto rank = detail::canonical_ranks(schema);
  data.level_order.resize(schema.num_covariates());
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    data.level_order[c].resize(schema.levels()[c]);
    for (std::size_t l = 0; l < schema.levels()[c]; ++l) data.level_order[c][rank[c][l]] = l;
  }
  const std::size_t m = data.cells.size();
  CompensatedSum tw;
  for (double w : data.weight) tw.add(w);
  const auto units = static_cast<std::uint64_t>(std::llround(tw.value()));
  std::vector<Tree> trees(opt.num_trees);
  parallel_for(opt.num_trees, [&](std::size_t b) {
    std::vector<double> boot(data.weight);
    if (opt.bootstrap && units > 0) {
      // multinomial resample of units, drawn cell by cell through conditional binomials
      std::mt19937_64 rng(mix_seed(opt.seed, b));
      std::uint64_t left = units;
      double mass = tw.value();
      for (std::size_t i = 0; i < m; ++i) {
        if (left == 0 || mass <= 0) {
          boot[i] = 0;
          continue;
        }
        const double p = std::min(1.0, data.weight[i] / mass);
        std::binomial_distribution<std::uint64_t> bin(left, p);
        const auto k = i + 1 == m ? left : bin(rng);
        boot[i] = static_cast<double>(k);
        left -= k;
        mass -= data.weight[i];
      }
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m; ++i)
      if (boot[i] > 0) idx.push_back(i);
    // cells missing from the resample still need leaf values: route them after growth
    Tree& tree = trees[b];
    tree.nodes.emplace_back();
    detail::grow(data, boot, idx, opt.depth, opt.min_leaf_weight, tree, 0);
    // recompute node values on the full data
    std::vector<CompensatedSum> fw(tree.nodes.size()), fy(tree.nodes.size());
    for (std::size_t i = 0; i < m; ++i) {
      int nd = 0;
      for (;;) {
        fw[static_cast<std::size_t>(nd)].add(data.weight[i]);
        fy[static_cast<std::size_t>(nd)].add(data.weight[i] * data.target[i]);
        const auto& n = tree.nodes[static_cast<std::size_t>(nd)];
        if (n.covariate < 0) break;
        nd = cell_level(schema, data.cells[i], static_cast<std::size_t>(n.covariate)) == n.level ? n.left : n.right;
      }
    }
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
      tree.nodes[k].weight = fw[k].value();
      tree.nodes[k].value = fw[k].value() > 0 ? fy[k].value() / fw[k].value() : tree.nodes[k].value;
    }
  });
  return trees;
}

inline OutcomeModel fit_bagged_trees(const CellTable& table, const TreeOptions& opt = {}) {
  detail::require_outcomes(table);
  const auto cells = detail::respondent_cells(table);
  std::vector<double> w, y;
  for (auto s : cells) {
    w.push_back(table.resp_counts[s]);
    y.push_back(table.cell_mean(s));
  }
  OutcomeModel m;
  m.kind = OutcomeKind::bagged_trees;
  m.num_trees = opt.num_trees;
  m.depth = opt.depth;
  m.seed = opt.seed;
  m.trees = fit_tree_ensemble(table.schema, cells, w, y, opt);
  m.predictions.assign(table.num_cells(), 0.0);
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    CompensatedSum acc;
    for (const auto& t : m.trees) acc.add(t.predict(table.schema, s));
    m.predictions[s] = acc.value() / static_cast<double>(m.trees.size());
  }
  return m;
}

/// Leaf-sharing smoother of a tree ensemble:
///   W(s, s') = (1/B) sum_b 1{s' in L_b(s)} / n(L_b(s)),  n(L) = sum of n over the leaf.
/// Only respondent cells appear as columns; rows are built for the given cells.
inline CellSmoother tree_smoother(const std::vector<Tree>& trees, const CellTable& table,
                                  std::span<const std::size_t> rows_for) {
  const auto& schema = table.schema;
  const auto cells = detail::respondent_cells(table);
  const double B = static_cast<double>(trees.size());
  std::vector<std::vector<std::vector<std::size_t>>> members(trees.size());
  std::vector<std::vector<double>> mass(trees.size());
  for (std::size_t b = 0; b < trees.size(); ++b) {
    members[b].resize(trees[b].nodes.size());
    mass[b].assign(trees[b].nodes.size(), 0.0);
    for (auto s : cells) {
      const auto leaf = static_cast<std::size_t>(trees[b].leaf_of(schema, s));
      members[b][leaf].push_back(s);
      mass[b][leaf] += table.resp_counts[s];
    }
  }
  CellSmoother W;
  W.rows.resize(table.num_cells());
  std::vector<double> acc(table.num_cells(), 0.0);
  for (auto s : rows_for) {
    std::vector<std::size_t> touched;
    for (std::size_t b = 0; b < trees.size(); ++b) {
      const auto leaf = static_cast<std::size_t>(trees[b].leaf_of(schema, s));
      if (!(mass[b][leaf] > 0)) continue;
      for (auto sp : members[b][leaf]) {
        if (acc[sp] == 0.0) touched.push_back(sp);
        acc[sp] += 1.0 / (B * mass[b][leaf]);
      }
    }
    std::sort(touched.begin(), touched.end());
    for (auto sp : touched) {
      W.rows[s].push_back({sp, acc[sp]});
      acc[sp] = 0.0;
    }
  }
  return W;
}

}  // namespace mlcal
