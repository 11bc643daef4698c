#pragma once

// Point estimates, plug-in variance, imbalance diagnostics and the lambda sweep.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlcal/common.hpp"
#include "mlcal/design.hpp"
#include "mlcal/outcomes.hpp"
#include "mlcal/solver.hpp"

namespace mlcal {

struct EstimateReport {
  std::string method;
  double estimate = 0.0;
  double variance = std::numeric_limits<double>::quiet_NaN();
  double ci_lower = std::numeric_limits<double>::quiet_NaN();
  double ci_upper = std::numeric_limits<double>::quiet_NaN();
  double alpha = 0.05;
  double n_eff = 0.0;
  double design_effect = 0.0;
  double bias_correction = 0.0;
};

namespace detail {

inline std::string cell_name(const CovariateSchema& schema, std::size_t s) {
  std::string out;
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    if (c) out += ',';
    out += schema.covariate(c).name + "=" + schema.covariate(c).labels[cell_level(schema, s, c)];
  }
  return out;
}

inline double weight_at(std::span<const double> gamma, const CellTable& t, std::size_t s) {
  return t.resp_counts[s] > 0 ? gamma[s] : 0.0;
}

inline void check_lengths(std::span<const double> gamma, const CellTable& t) {
  if (gamma.size() != t.num_cells()) throw std::invalid_argument("weight vector length does not match cells");
}

inline void require_prediction(const OutcomeModel& m, std::size_t s, const CovariateSchema& schema) {
  if (m.predictions.size() <= s || std::isnan(m.predictions[s]))
    throw std::invalid_argument("outcome model cannot predict populated cell " + cell_name(schema, s));
}

}  // namespace detail

struct SampleSize {
  double n_eff = 0.0;
  double design_effect = 0.0;
};

/// n_eff = (sum n gamma)^2 / sum n gamma^2 and n / n_eff.
inline SampleSize effective_sample_size(std::span<const double> gamma, const CellTable& table) {
  detail::check_lengths(gamma, table);
  CompensatedSum a, b;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double g = detail::weight_at(gamma, table, s);
    a.add(table.resp_counts[s] * g);
    b.add(table.resp_counts[s] * g * g);
  }
  SampleSize out;
  out.n_eff = b.value() > 0 ? a.value() * a.value() / b.value() : 0.0;
  out.design_effect = out.n_eff > 0 ? table.respondent_size() / out.n_eff : kInf;
  return out;
}

/// (1/N) sum_s n_s gamma(s) Ybar_s.
inline double weighted_mean_value(std::span<const double> gamma, const CellTable& table) {
  detail::check_lengths(gamma, table);
  if (!table.has_outcomes()) throw std::invalid_argument("weighted mean needs respondent outcomes");
  CompensatedSum acc;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) acc.add(gamma[s] * (*table.resp_sums)[s]);
  return acc.value() / table.population_size();
}

/// (1/N^2) sum_s gamma(s)^2 sum_{i in s} (Y_i - m_s)^2 from within-cell sums of squares.
inline double plugin_variance(std::span<const double> gamma, std::span<const double> centers, const CellTable& table) {
  if (!table.resp_sumsq) throw std::invalid_argument("variance needs within-cell sums of squares");
  const double N = table.population_size();
  CompensatedSum acc;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double n = table.resp_counts[s];
    if (!(n > 0)) continue;
    const double mean = (*table.resp_sums)[s] / n;
    const double within = std::max(0.0, (*table.resp_sumsq)[s] - (*table.resp_sums)[s] * mean);
    const double shift = mean - centers[s];
    acc.add(gamma[s] * gamma[s] * (within + n * shift * shift));
  }
  return acc.value() / (N * N);
}

inline void attach_interval(EstimateReport& r, double variance, double alpha) {
  if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("alpha must be in (0, 1)");
  r.alpha = alpha;
  r.variance = variance;
  const double z = normal_quantile(1 - alpha / 2);
  r.ci_lower = r.estimate - z * std::sqrt(variance);
  r.ci_upper = r.estimate + z * std::sqrt(variance);
}

/// Weighting estimator. When second moments are available the interval uses
/// residuals about the respondent cell means.
inline EstimateReport weighted_mean(std::span<const double> gamma, const CellTable& table,
                                    std::string method = "weighted", double alpha = 0.05) {
  EstimateReport r;
  r.method = std::move(method);
  r.estimate = weighted_mean_value(gamma, table);
  const auto ss = effective_sample_size(gamma, table);
  r.n_eff = ss.n_eff;
  r.design_effect = ss.design_effect;
  if (table.resp_sumsq) {
    std::vector<double> centers(table.num_cells(), 0.0);
    for (std::size_t s = 0; s < table.num_cells(); ++s)
      if (table.resp_counts[s] > 0) centers[s] = table.cell_mean(s);
    attach_interval(r, plugin_variance(gamma, centers, table), alpha);
  }
  return r;
}

inline EstimateReport weighted_mean(const WeightSolution& w, const CellTable& table, std::string method = "weighted",
                                    double alpha = 0.05) {
  return weighted_mean(std::span<const double>(w.gamma), table, std::move(method), alpha);
}

/// gamma(s) = N^P_s / n^R_s. Fails when a populated cell has no respondents.
inline WeightSolution poststrat_weights(const CellTable& table) {
  table.validate();
  std::vector<std::size_t> empty;
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.pop_counts[s] > 0 && !(table.resp_counts[s] > 0)) empty.push_back(s);
  if (!empty.empty()) {
    std::string msg = "post-stratification infeasible: " + std::to_string(empty.size()) +
                      " populated cells have no respondents:";
    const std::size_t show = std::min<std::size_t>(empty.size(), 20);
    for (std::size_t i = 0; i < show; ++i) msg += " [" + detail::cell_name(table.schema, empty[i]) + "]";
    if (show < empty.size()) msg += " ...";
    throw InfeasibleError(msg);
  }
  WeightSolution w;
  w.gamma.assign(table.num_cells(), 0.0);
  w.support.assign(table.num_cells(), 0);
  for (std::size_t s = 0; s < table.num_cells(); ++s)
    if (table.resp_counts[s] > 0) {
      w.support[s] = 1;
      w.gamma[s] = table.pop_counts[s] / table.resp_counts[s];
    }
  w.status = SolveStatus::converged;
  w.dual.converged = true;
  return w;
}

/// Marginalizes the table onto a subset of covariates.
inline CellTable collapse_table(const CellTable& table, std::span<const std::size_t> keep) {
  if (keep.empty()) throw std::invalid_argument("collapse needs at least one covariate");
  std::vector<Covariate> covs;
  for (auto c : keep) covs.push_back(table.schema.covariate(c));
  CovariateSchema schema(std::move(covs));
  const std::size_t J = schema.num_cells();
  CellTable out{schema, std::vector<double>(J, 0.0), std::vector<double>(J, 0.0), std::nullopt, std::nullopt};
  if (table.resp_sums) out.resp_sums.emplace(J, 0.0);
  if (table.resp_sumsq) out.resp_sumsq.emplace(J, 0.0);
  std::vector<std::size_t> lv(keep.size());
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    for (std::size_t i = 0; i < keep.size(); ++i) lv[i] = cell_level(table.schema, s, keep[i]);
    const auto t = encode_cell(schema, lv).index;
    out.pop_counts[t] += table.pop_counts[s];
    out.resp_counts[t] += table.resp_counts[s];
    if (table.resp_sums) (*out.resp_sums)[t] += (*table.resp_sums)[s];
    if (table.resp_sumsq) (*out.resp_sumsq)[t] += (*table.resp_sumsq)[s];
  }
  return out;
}

/// Post-stratification on a coarsened schema, expanded back to the full cells.
inline WeightSolution collapsed_poststrat_weights(const CellTable& table, std::span<const std::size_t> keep) {
  const auto small = collapse_table(table, keep);
  const auto ws = poststrat_weights(small);
  WeightSolution w;
  w.gamma.assign(table.num_cells(), 0.0);
  w.support.assign(table.num_cells(), 0);
  std::vector<std::size_t> lv(keep.size());
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!(table.resp_counts[s] > 0)) continue;
    for (std::size_t i = 0; i < keep.size(); ++i) lv[i] = cell_level(table.schema, s, keep[i]);
    w.gamma[s] = ws.gamma[encode_cell(small.schema, lv).index];
    w.support[s] = 1;
  }
  w.status = SolveStatus::converged;
  w.dual.converged = true;
  return w;
}

/// (1/N) sum_s N^P_s mu_hat_s.
inline EstimateReport mrp_estimate(const OutcomeModel& model, const CellTable& table) {
  CompensatedSum acc;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!(table.pop_counts[s] > 0)) continue;
    detail::require_prediction(model, s, table.schema);
    acc.add(table.pop_counts[s] * model.predictions[s]);
  }
  EstimateReport r;
  r.method = "mrp";
  r.estimate = acc.value() / table.population_size();
  return r;
}

/// (1/N) sum_s mu_hat_s (N^P_s - n_s gamma(s)).
inline double bias_estimate(const OutcomeModel& model, std::span<const double> gamma, const CellTable& table) {
  detail::check_lengths(gamma, table);
  CompensatedSum acc;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double gap = table.pop_counts[s] - table.resp_counts[s] * detail::weight_at(gamma, table, s);
    if (gap == 0) continue;
    detail::require_prediction(model, s, table.schema);
    acc.add(model.predictions[s] * gap);
  }
  return acc.value() / table.population_size();
}

struct DrpForms {
  double weighting_form = 0.0;  // mu(gamma) + bias estimate
  double model_form = 0.0;      // mrp + weighted residual correction
};

inline DrpForms drp_forms(const OutcomeModel& model, std::span<const double> gamma, const CellTable& table) {
  const double N = table.population_size();
  DrpForms f;
  f.weighting_form = weighted_mean_value(gamma, table) + bias_estimate(model, gamma, table);
  CompensatedSum corr;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    if (!(table.resp_counts[s] > 0)) continue;
    detail::require_prediction(model, s, table.schema);
    corr.add(gamma[s] * ((*table.resp_sums)[s] - table.resp_counts[s] * model.predictions[s]));
  }
  f.model_form = mrp_estimate(model, table).estimate + corr.value() / N;
  return f;
}

/// Bias-corrected weighting estimate. Both algebraic forms are evaluated and
/// must agree to 1e-12 relative; the interval uses outcome-model residuals.
inline EstimateReport drp_estimate(const OutcomeModel& model, std::span<const double> gamma, const CellTable& table,
                                   double alpha = 0.05) {
  const auto f = drp_forms(model, gamma, table);
  const double scale = std::max({std::abs(f.weighting_form), std::abs(f.model_form), 1e-300});
  if (std::abs(f.weighting_form - f.model_form) > 1e-12 * scale)
    throw std::logic_error("DRP forms disagree: " + format_number(f.weighting_form) + " vs " +
                           format_number(f.model_form));
  EstimateReport r;
  r.method = "drp";
  r.estimate = f.weighting_form;
  r.bias_correction = bias_estimate(model, gamma, table);
  const auto ss = effective_sample_size(gamma, table);
  r.n_eff = ss.n_eff;
  r.design_effect = ss.design_effect;
  if (table.resp_sumsq) {
    std::vector<double> centers(table.num_cells(), 0.0);
    for (std::size_t s = 0; s < table.num_cells(); ++s)
      if (table.resp_counts[s] > 0) centers[s] = model.predictions[s];
    attach_interval(r, plugin_variance(gamma, centers, table), alpha);
  }
  return r;
}

struct VarianceInterval {
  double variance = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Plug-in variance with residuals about the model predictions and the
/// matching normal interval around the DRP estimate.
inline VarianceInterval variance_ci(const OutcomeModel& model, std::span<const double> gamma, const CellTable& table,
                                    double alpha = 0.05) {
  if (!table.resp_sumsq) throw std::invalid_argument("variance needs unit outcomes or within-cell sums of squares");
  const auto r = drp_estimate(model, gamma, table, alpha);
  return {r.variance, r.ci_lower, r.ci_upper};
}

// ---------------------------------------------------------------- imbalance

struct ImbalanceReport {
  std::vector<std::vector<double>> relative;  // per order, per column; NaN where the population total is 0
  std::vector<std::size_t> skipped_columns;
  std::vector<double> relative_norm;  // l2 over non-skipped columns
  std::vector<double> absolute_norm;  // |D^(k)T (n gamma - N^P)|_2
  double cell_imbalance_sq = 0.0;     // sum_s (n_s gamma_s - N^P_s)^2
  double noise_factor = 0.0;          // sum_s (n_s/N)^2 gamma_s^2
  std::optional<double> bias_bound;   // (1/N^2) sum mu^2 * cell_imbalance_sq, when cell means are supplied
};

inline ImbalanceReport imbalance_report(std::span<const double> gamma, const InteractionDesign& design,
                                        const CellTable& table, std::span<const double> cell_means = {}) {
  detail::check_lengths(gamma, table);
  std::vector<double> g(table.num_cells());
  for (std::size_t s = 0; s < g.size(); ++s) g[s] = detail::weight_at(gamma, table, s);
  const auto imb = imbalance_vector(design, table, g);
  const auto tot = design.transpose_times(table.pop_counts);
  ImbalanceReport r;
  const double N = table.population_size();
  for (std::size_t k = 1; k <= design.max_order(); ++k) {
    std::vector<double> rel;
    double rn = 0.0, an = 0.0;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) {
      an += imb[j] * imb[j];
      if (tot[j] > 0) {
        rel.push_back(std::abs(imb[j]) / tot[j]);
        rn += rel.back() * rel.back();
      } else {
        rel.push_back(std::numeric_limits<double>::quiet_NaN());
        r.skipped_columns.push_back(j);
      }
    }
    r.relative.push_back(std::move(rel));
    r.relative_norm.push_back(std::sqrt(rn));
    r.absolute_norm.push_back(std::sqrt(an));
  }
  CompensatedSum ci, nf, mu2;
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double d = table.resp_counts[s] * g[s] - table.pop_counts[s];
    ci.add(d * d);
    const double w = table.resp_counts[s] / N * g[s];
    nf.add(w * w);
    if (!cell_means.empty() && table.pop_counts[s] + table.resp_counts[s] > 0) mu2.add(cell_means[s] * cell_means[s]);
  }
  r.cell_imbalance_sq = ci.value();
  r.noise_factor = nf.value();
  if (!cell_means.empty()) r.bias_bound = mu2.value() * r.cell_imbalance_sq / (N * N);
  return r;
}

/// sum over orders k >= 2 of |D^(k)T (n gamma - N^P)|^2.
inline double higher_order_imbalance(std::span<const double> gamma, const InteractionDesign& design,
                                     const CellTable& table) {
  const auto imb = imbalance_vector(design, table, gamma);
  CompensatedSum acc;
  for (std::size_t j = design.block_end(1); j < imb.size(); ++j) acc.add(imb[j] * imb[j]);
  return acc.value();
}

// ---------------------------------------------------------------- sweep

struct TradeoffPoint {
  double lambda = 0.0;
  double imbalance_sq = 0.0;
  double n_eff = 0.0;
  double sum_sq_weights = 0.0;
  bool converged = false;
  std::string message;
};

struct TradeoffCurve {
  std::vector<TradeoffPoint> points;  // in decreasing lambda order
  double raking_imbalance_sq = 0.0;
  double raking_n_eff = 0.0;
  double floor_imbalance_sq = 0.0;
  double reduction_fraction = 0.95;
  std::optional<std::size_t> selected;
  std::string rule;
  bool imbalance_monotone = true;
  bool weights_monotone = true;
  bool n_eff_monotone = true;
};

/// Default grid: 25 log-spaced points over [1e-3, 1e6] / J.
inline std::vector<double> default_lambda_grid(std::size_t num_cells, std::size_t points = 25) {
  std::vector<double> g;
  const double lo = -3.0, hi = 6.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double e = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    g.push_back(std::pow(10.0, e) / static_cast<double>(num_cells));
  }
  return g;
}

/// Largest lambda whose imbalance reduction relative to raking reaches the
/// given fraction of the reduction at the smallest converged lambda.
inline std::optional<std::size_t> select_lambda(const TradeoffCurve& c) {
  std::optional<std::size_t> floor_idx;
  for (std::size_t i = 0; i < c.points.size(); ++i)
    if (c.points[i].converged && (!floor_idx || c.points[i].lambda < c.points[*floor_idx].lambda)) floor_idx = i;
  if (!floor_idx) return std::nullopt;
  const double full = c.raking_imbalance_sq - c.points[*floor_idx].imbalance_sq;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const auto& p = c.points[i];
    if (!p.converged) continue;
    if (c.raking_imbalance_sq - p.imbalance_sq >= c.reduction_fraction * full &&
        (!best || p.lambda > c.points[*best].lambda))
      best = i;
  }
  return best;
}

/// Solves the multilevel program on every grid value with lambda_k = lambda for
/// all k >= 2, warm-starting from the neighbouring larger lambda.
inline TradeoffCurve sweep_tradeoff(const InteractionDesign& design, const CellTable& table, std::vector<double> grid,
                                    std::size_t max_order, Bounds bounds = {}, double fraction = 0.95) {
  if (grid.empty()) throw std::invalid_argument("lambda grid is empty");
  for (double l : grid)
    if (!(l > 0) || !std::isfinite(l)) throw std::invalid_argument("lambda grid values must be positive and finite");
  if (max_order < 2) throw std::invalid_argument("sweep needs max_order >= 2");
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  TradeoffCurve c;
  c.reduction_fraction = fraction;
  c.rule = "largest lambda with imbalance reduction >= " + format_number(fraction) +
           " of (raking - smallest lambda)";
  const auto rake = calibrate(design, table, CalibrationSpec::raking(bounds));
  c.raking_imbalance_sq = higher_order_imbalance(rake.gamma, design, table);
  c.raking_n_eff = rake.n_eff;
  std::vector<double> warm;
  for (double l : grid) {
    const auto spec = CalibrationSpec::multilevel(max_order, l, bounds);
    TradeoffPoint p;
    p.lambda = l;
    try {
      const auto sol = calibrate(design, table, spec, warm);
      p.imbalance_sq = higher_order_imbalance(sol.gamma, design, table);
      p.n_eff = sol.n_eff;
      p.sum_sq_weights = sol.sum_sq_weights;
      p.converged = sol.status == SolveStatus::converged;
      p.message = sol.message;
      warm = sol.dual.beta;
    } catch (const std::exception& e) {
      p.message = e.what();
    }
    c.points.push_back(p);
  }
  double floor = kInf;
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const auto& p = c.points[i];
    if (p.converged) floor = std::min(floor, p.imbalance_sq);
    if (i == 0 || !p.converged || !c.points[i - 1].converged) continue;
    const auto& q = c.points[i - 1];
    const double slack = 1e-7;
    if (p.imbalance_sq > q.imbalance_sq * (1 + slack) + 1e-9) c.imbalance_monotone = false;
    if (p.sum_sq_weights < q.sum_sq_weights * (1 - slack)) c.weights_monotone = false;
    if (p.n_eff > q.n_eff * (1 + slack)) c.n_eff_monotone = false;
  }
  c.floor_imbalance_sq = floor;
  c.selected = select_lambda(c);
  return c;
}

}  // namespace mlcal
