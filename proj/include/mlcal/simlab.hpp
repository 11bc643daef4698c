#pragma once

// Synthetic populations, response mechanisms, a replication engine and
// empirical checks of the balance bound.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mlcal/common.hpp"
#include "mlcal/design.hpp"
#include "mlcal/estimators.hpp"
#include "mlcal/outcomes.hpp"
#include "mlcal/solver.hpp"

namespace mlcal {

// ---------------------------------------------------------------- presets

inline CovariateSchema small_preset_schema() {
  return CovariateSchema({{"sex", {"m", "f"}},
                          {"age", {"18-29", "30-44", "45-64", "65+"}},
                          {"educ", {"hs", "college", "grad"}}});
}

/// Eight covariates with 6, 9, 4, 2, 4, 3, 2 and 5 levels (J = 51,840).
inline CovariateSchema election_preset_schema() {
  const std::vector<std::pair<std::string, std::size_t>> spec{
      {"education", 6}, {"income", 9}, {"race", 4}, {"female", 2},
      {"age", 4},       {"party", 3},  {"born_again", 2}, {"region", 5}};
  std::vector<Covariate> covs;
  for (const auto& [name, L] : spec) {
    Covariate c{name, {}};
    for (std::size_t l = 0; l < L; ++l) c.labels.push_back(std::to_string(l + 1));
    covs.push_back(std::move(c));
  }
  return CovariateSchema(std::move(covs));
}

// ---------------------------------------------------------------- cell distribution

struct PairTilt {
  std::size_t a = 0, b = 0;
  double strength = 0.0;  // log-odds bonus for level agreement (scaled ranks)
};

/// Independent covariates with the given marginals, optionally tilted by
/// pairwise log-linear terms strength * (rank_a / (L_a - 1)) * (rank_b / (L_b - 1)).
inline std::vector<double> cell_probabilities(const CovariateSchema& schema,
                                              const std::vector<std::vector<double>>& marginals,
                                              const std::vector<PairTilt>& tilts = {}) {
  const std::size_t d = schema.num_covariates();
  if (marginals.size() != d) throw std::invalid_argument("need one marginal per covariate");
  for (std::size_t c = 0; c < d; ++c) {
    if (marginals[c].size() != schema.levels()[c]) throw std::invalid_argument("marginal length mismatch");
    for (double p : marginals[c])
      if (!(p > 0) || !std::isfinite(p)) throw std::invalid_argument("marginal probabilities must be positive");
  }
  std::vector<double> p(schema.num_cells());
  CompensatedSum tot;
  for (std::size_t s = 0; s < p.size(); ++s) {
    double lp = 0.0;
    for (std::size_t c = 0; c < d; ++c) lp += std::log(marginals[c][cell_level(schema, s, c)]);
    for (const auto& t : tilts) {
      const double ra = static_cast<double>(cell_level(schema, s, t.a)) / static_cast<double>(schema.levels()[t.a] - 1);
      const double rb = static_cast<double>(cell_level(schema, s, t.b)) / static_cast<double>(schema.levels()[t.b] - 1);
      lp += t.strength * ra * rb;
    }
    p[s] = std::exp(lp);
    tot.add(p[s]);
  }
  for (auto& v : p) v /= tot.value();
  return p;
}

inline std::vector<double> uniform_cell_probabilities(const CovariateSchema& schema) {
  return std::vector<double>(schema.num_cells(), 1.0 / static_cast<double>(schema.num_cells()));
}

// ---------------------------------------------------------------- coefficients

/// Random coefficients over the columns of orders 1..K. Order-k entries are
/// N(0, (scale * tau_k)^2 / E[active columns of order k]) so that each order
/// contributes roughly variance (scale * tau_k)^2 to the linear predictor.
/// The intercept is zero.
inline std::vector<double> random_coefficients(const InteractionDesign& design, std::size_t order,
                                               const std::vector<double>& tau, double scale, std::uint64_t seed) {
  if (tau.size() < order) throw std::invalid_argument("need one tau per order");
  const auto& schema = design.schema();
  std::vector<double> beta(design.block_end(order), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  // expected active count: sum over groups of prod (L-1)/L  * ... each cell activates one column per group with all
  // non-reference levels; probability under uniform cells is prod (L-1)/L
  for (std::size_t k = 1; k <= order; ++k) {
    double active = 0.0;
    for (const auto& g : design.groups()) {
      if (g.covariates.size() != k) continue;
      double pr = 1.0;
      for (auto c : g.covariates) pr *= static_cast<double>(schema.levels()[c] - 1) / static_cast<double>(schema.levels()[c]);
      active += pr;
    }
    const double sd = active > 0 ? scale * tau[k - 1] / std::sqrt(active) : 0.0;
    for (std::size_t j = design.block_begin(k) + (k == 1 ? 1 : 0); j < design.block_end(k); ++j) beta[j] = sd * z(rng);
  }
  return beta;
}

// ---------------------------------------------------------------- response models

/// pi(s) = logistic(beta_0 + scale * sum_{j >= 1} D_sj beta_j).
inline std::vector<double> response_logit(const InteractionDesign& design, std::span<const double> beta,
                                          double scale = 1.0) {
  const std::size_t order = [&] {
    for (std::size_t k = 1; k <= design.max_order(); ++k)
      if (design.block_end(k) == beta.size()) return k;
    throw std::invalid_argument("coefficients do not conform to design blocks");
  }();
  std::vector<double> pi(design.num_rows());
  for (std::size_t s = 0; s < pi.size(); ++s) {
    const double z = beta[0] + scale * (design.row_dot(s, beta, order) - beta[0]);
    pi[s] = logistic(z);
  }
  return pi;
}

/// Sets beta_0 so that the population response rate sum N_s pi_s / N equals `rate`.
inline void tune_intercept(const InteractionDesign& design, std::vector<double>& beta, double scale,
                           std::span<const double> pop_counts, double rate) {
  if (!(rate > 0 && rate < 1)) throw std::invalid_argument("response rate must lie in (0, 1)");
  const std::size_t order = [&] {
    for (std::size_t k = 1; k <= design.max_order(); ++k)
      if (design.block_end(k) == beta.size()) return k;
    throw std::invalid_argument("coefficients do not conform to design blocks");
  }();
  std::vector<std::size_t> cells;
  std::vector<double> eta;
  double N = 0.0;
  for (std::size_t s = 0; s < pop_counts.size(); ++s)
    if (pop_counts[s] > 0) {
      cells.push_back(s);
      eta.push_back(scale * (design.row_dot(s, beta, order) - beta[0]));
      N += pop_counts[s];
    }
  auto mean_rate = [&](double b0) {
    CompensatedSum acc;
    for (std::size_t i = 0; i < cells.size(); ++i) acc.add(pop_counts[cells[i]] * logistic(b0 + eta[i]));
    return acc.value() / N;
  };
  double lo = -60, hi = 60;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_rate(mid) < rate ? lo : hi) = mid;
  }
  beta[0] = 0.5 * (lo + hi);
}

struct ForestResponse {
  std::vector<double> pi;
  std::size_t clipped = 0;
  double pi_min = 1e-4;
};

/// Leaf-sharing response probabilities of a bagged tree fit to a reference
/// respondent draw: pi(s) = (1/B) sum_b n(L_b(s)) / N(L_b(s)), clipped to [pi_min, 1].
inline ForestResponse response_forest(const CellTable& reference, const TreeOptions& opt, double pi_min = 1e-4) {
  std::vector<std::size_t> cells;
  std::vector<double> w, y;
  for (std::size_t s = 0; s < reference.num_cells(); ++s)
    if (reference.pop_counts[s] > 0) {
      cells.push_back(s);
      w.push_back(reference.pop_counts[s]);
      y.push_back(reference.resp_counts[s] / reference.pop_counts[s]);
    }
  const auto trees = fit_tree_ensemble(reference.schema, cells, w, y, opt);
  ForestResponse out;
  out.pi_min = pi_min;
  out.pi.assign(reference.num_cells(), 0.0);
  for (std::size_t s = 0; s < reference.num_cells(); ++s) {
    CompensatedSum acc;
    for (const auto& t : trees) acc.add(t.predict(reference.schema, s));
    double p = acc.value() / static_cast<double>(trees.size());
    if (p < pi_min || p > 1) {
      ++out.clipped;
      p = clip(p, pi_min, 1.0);
    }
    out.pi[s] = p;
  }
  return out;
}

// ---------------------------------------------------------------- populations

struct OutcomeSpec {
  enum class Kind { linear, logistic, reference_indicator } kind = Kind::logistic;
  std::vector<double> coefficients;  // over design columns of some order
  double scale = 1.0;
  double noise_sd = 1.0;     // linear only
  bool redraw = true;        // redraw unit outcomes in each replication from the cell model
};

struct Population {
  CovariateSchema schema;
  std::vector<std::uint32_t> cells;  // per unit
  std::vector<double> y;             // per unit
  std::vector<double> cell_signal;   // per cell: outcome probability (logistic) or mean (linear)
  OutcomeSpec::Kind kind = OutcomeSpec::Kind::logistic;
  double noise_sd = 0.0;
  bool redraw = false;

  std::size_t size() const noexcept { return cells.size(); }

  CellTable table() const {
    const std::size_t J = schema.num_cells();
    CellTable t{schema, std::vector<double>(J, 0.0), std::vector<double>(J, 0.0), std::nullopt, std::nullopt};
    for (auto c : cells) t.pop_counts[c] += 1;
    return t;
  }

  /// Within-cell population means; NaN where the cell is empty.
  std::vector<double> cell_means() const {
    const std::size_t J = schema.num_cells();
    std::vector<CompensatedSum> acc(J);
    std::vector<double> cnt(J, 0.0), mu(J, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      acc[cells[i]].add(y[i]);
      cnt[cells[i]] += 1;
    }
    for (std::size_t s = 0; s < J; ++s)
      if (cnt[s] > 0) mu[s] = acc[s].value() / cnt[s];
    return mu;
  }

  double mean() const {
    CompensatedSum acc;
    for (double v : y) acc.add(v);
    return acc.value() / static_cast<double>(y.size());
  }
};

namespace detail {

inline double draw_outcome(OutcomeSpec::Kind kind, double signal, double sd, std::mt19937_64& rng) {
  switch (kind) {
    case OutcomeSpec::Kind::linear: return signal + sd * std::normal_distribution<double>()(rng);
    case OutcomeSpec::Kind::logistic: return std::uniform_real_distribution<double>()(rng) < signal ? 1.0 : 0.0;
    case OutcomeSpec::Kind::reference_indicator: return signal;
  }
  return signal;
}

}  // namespace detail

/// Draws N units from the cell distribution and their outcomes.
inline Population gen_population(const InteractionDesign& design, std::size_t N, std::span<const double> cell_probs,
                                 const OutcomeSpec& outcome, std::uint64_t seed) {
  const auto& schema = design.schema();
  if (cell_probs.size() != schema.num_cells()) throw std::invalid_argument("cell probability vector has wrong length");
  for (double p : cell_probs)
    if (!(p >= 0) || !std::isfinite(p)) throw std::invalid_argument("invalid cell probability");
  if (N == 0) throw std::invalid_argument("population size must be positive");
  if (N < schema.num_cells())
    std::clog << "warning: population size " << N << " is below the number of cells " << schema.num_cells() << "\n";
  Population pop;
  pop.schema = schema;
  pop.kind = outcome.kind;
  pop.noise_sd = outcome.noise_sd;
  pop.redraw = outcome.redraw;
  pop.cell_signal.assign(schema.num_cells(), 0.0);
  if (outcome.kind == OutcomeSpec::Kind::reference_indicator) {
    pop.cell_signal[0] = 1.0;
    pop.redraw = false;
  } else {
    if (outcome.kind == OutcomeSpec::Kind::logistic)
      pop.cell_signal = response_logit(design, outcome.coefficients, outcome.scale);
    else {
      std::size_t order = 0;
      for (std::size_t k = 1; k <= design.max_order(); ++k)
        if (design.block_end(k) == outcome.coefficients.size()) order = k;
      if (order == 0) throw std::invalid_argument("outcome coefficients do not conform to design blocks");
      for (std::size_t s = 0; s < schema.num_cells(); ++s)
        pop.cell_signal[s] = outcome.coefficients[0] +
                             outcome.scale * (design.row_dot(s, outcome.coefficients, order) - outcome.coefficients[0]);
    }
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(cell_probs.begin(), cell_probs.end());
  pop.cells.resize(N);
  pop.y.resize(N);
  for (std::size_t i = 0; i < N; ++i) pop.cells[i] = static_cast<std::uint32_t>(pick(rng));
  std::mt19937_64 yrng(mix_seed(seed, 1));
  for (std::size_t i = 0; i < N; ++i)
    pop.y[i] = detail::draw_outcome(pop.kind, pop.cell_signal[pop.cells[i]], pop.noise_sd, yrng);
  return pop;
}

// ---------------------------------------------------------------- replications

/// One replication at the cell level: resampled population counts, true cell
/// means of the resampled population, and respondent sums.
struct Replicate {
  CellTable table;
  std::vector<double> mu;  // NaN on empty cells
  double truth = 0.0;
};

/// Resamples N units with replacement (optional), redraws outcomes when the
/// population asks for it, and draws R_i ~ Bernoulli(pi(S_i)).
inline Replicate draw_replicate(const Population& pop, std::span<const double> pi, std::uint64_t seed,
                                bool resample = true) {
  const std::size_t J = pop.schema.num_cells(), N = pop.size();
  std::mt19937_64 rng(seed);
  Replicate r{CellTable{pop.schema, std::vector<double>(J, 0.0), std::vector<double>(J, 0.0),
                        std::vector<double>(J, 0.0), std::vector<double>(J, 0.0)},
              std::vector<double>(J, std::numeric_limits<double>::quiet_NaN()), 0.0};
  std::vector<CompensatedSum> ysum(J);
  CompensatedSum total;
  std::uniform_int_distribution<std::size_t> unit(0, N - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t k = resample ? unit(rng) : i;
    const std::size_t s = pop.cells[k];
    const double y = pop.redraw ? detail::draw_outcome(pop.kind, pop.cell_signal[s], pop.noise_sd, rng) : pop.y[k];
    r.table.pop_counts[s] += 1;
    ysum[s].add(y);
    total.add(y);
    if (u(rng) < pi[s]) {
      r.table.resp_counts[s] += 1;
      (*r.table.resp_sums)[s] += y;
      (*r.table.resp_sumsq)[s] += y * y;
    }
  }
  for (std::size_t s = 0; s < J; ++s)
    if (r.table.pop_counts[s] > 0) r.mu[s] = ysum[s].value() / r.table.pop_counts[s];
  r.truth = total.value() / static_cast<double>(N);
  return r;
}

/// (1/N) sum_i R_i Y_i / pi(S_i).
inline double oracle_ht(const CellTable& draw, std::span<const double> pi) {
  CompensatedSum acc;
  for (std::size_t s = 0; s < draw.num_cells(); ++s)
    if (draw.resp_counts[s] > 0) acc.add((*draw.resp_sums)[s] / pi[s]);
  return acc.value() / draw.population_size();
}

/// Residuals of the two estimation-error identities for given weights and
/// (for the second) an outcome model:
///   mu(gamma) - mu = (1/N) sum (n gamma - N) mu_s + (1/N) sum n gamma eps_s
///   drp - mu       = (1/N) sum (n gamma - N)(mu_s - mu_hat_s) + (1/N) sum n gamma eps_s
struct IdentityCheck {
  double weighting = 0.0;
  double drp = 0.0;
};

inline IdentityCheck error_identities(const Replicate& r, std::span<const double> gamma, const OutcomeModel* model) {
  const auto& t = r.table;
  const double N = t.population_size();
  CompensatedSum imb, noise, imb2;
  for (std::size_t s = 0; s < t.num_cells(); ++s) {
    const double n = t.resp_counts[s];
    const double g = n > 0 ? gamma[s] : 0.0;
    const double gap = n * g - t.pop_counts[s];
    if (t.pop_counts[s] > 0) imb.add(gap * r.mu[s]);
    if (n > 0) noise.add(n * g * (t.cell_mean(s) - r.mu[s]));
    if (model && gap != 0) imb2.add(gap * (r.mu[s] - model->predictions[s]));
  }
  IdentityCheck c;
  const double est = weighted_mean_value(gamma, t);
  c.weighting = std::abs((est - r.truth) - (imb.value() + noise.value()) / N);
  if (model) {
    const double drp = drp_forms(*model, gamma, t).weighting_form;
    c.drp = std::abs((drp - r.truth) - (imb2.value() + noise.value()) / N);
  }
  return c;
}

struct SuiteConfig {
  bool raking = true;
  bool multilevel = true;
  std::size_t multilevel_order = 2;
  double multilevel_lambda = 1.0;  // on the population-count scale; divided by N internally
  bool poststrat = true;
  bool ridge = true;
  std::size_t ridge_order = 3;
  double ridge_penalty = 1.0;
  bool trees = false;
  TreeOptions tree_options{20, 6, 1, 1.0, true};
  Bounds bounds{};
  double alpha = 0.05;
  bool resample = true;
};

struct EstimatorSummary {
  std::string name;
  std::size_t replications = 0;
  std::size_t failures = 0;
  double bias = 0.0;
  double bias_se = 0.0;
  double rmse = 0.0;
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double mean_n_eff = std::numeric_limits<double>::quiet_NaN();
  std::string first_failure;
};

struct SimResult {
  std::uint64_t seed = 0;
  std::size_t replications = 0;
  std::vector<EstimatorSummary> estimators;
  double max_weighting_identity_residual = 0.0;
  double max_drp_identity_residual = 0.0;
  double mean_respondents = 0.0;
  double pi_min = 0.0;

  const EstimatorSummary& get(const std::string& name) const {
    for (const auto& e : estimators)
      if (e.name == name) return e;
    throw std::out_of_range("no estimator named " + name);
  }
};

namespace detail {

struct RepOutcome {
  bool ok = false;
  double error = 0.0;
  bool has_ci = false;
  bool covered = false;
  double n_eff = std::numeric_limits<double>::quiet_NaN();
  std::string failure;
};

inline std::vector<std::string> suite_names(const SuiteConfig& cfg) {
  std::vector<std::string> names;
  if (cfg.raking) names.push_back("raking");
  if (cfg.multilevel) names.push_back("multilevel");
  if (cfg.poststrat) names.push_back("poststrat");
  if (cfg.ridge) {
    names.push_back("mrp_ridge");
    if (cfg.raking) names.push_back("drp_ridge_raking");
    if (cfg.multilevel) names.push_back("drp_ridge_multilevel");
  }
  if (cfg.trees) {
    names.push_back("mrp_trees");
    if (cfg.raking) names.push_back("drp_trees_raking");
  }
  names.push_back("oracle_ht");
  return names;
}

}  // namespace detail

/// Runs the estimator suite on R independent replications. Replication r uses
/// seed mix_seed(seed, r); results do not depend on thread scheduling.
inline SimResult run_replications(const Population& pop, std::span<const double> pi, const InteractionDesign& design,
                                  const SuiteConfig& cfg, std::size_t R, std::uint64_t seed,
                                  unsigned max_threads = 0) {
  if (R < 1) throw std::invalid_argument("need at least one replication");
  if (pi.size() != pop.schema.num_cells()) throw std::invalid_argument("response table has wrong length");
  const auto names = detail::suite_names(cfg);
  const std::size_t E = names.size();
  std::vector<std::vector<detail::RepOutcome>> out(R, std::vector<detail::RepOutcome>(E));
  std::vector<IdentityCheck> ident(R);
  std::vector<double> nresp(R, 0.0);
  const double z = normal_quantile(1 - cfg.alpha / 2);
  parallel_for(R, [&](std::size_t r) {
    const auto rep = draw_replicate(pop, pi, mix_seed(seed, r), cfg.resample);
    const auto& t = rep.table;
    nresp[r] = t.respondent_size();
    const double N = t.population_size();
    std::map<std::string, detail::RepOutcome> res;
    auto record = [&](const std::string& name, auto&& fn) {
      detail::RepOutcome o;
      try {
        fn(o);
        o.ok = std::isfinite(o.error);
        if (!o.ok) o.failure = "non-finite estimate";
      } catch (const std::exception& e) {
        o.ok = false;
        o.failure = e.what();
      }
      res[name] = o;
    };
    auto with_ci = [&](detail::RepOutcome& o, const EstimateReport& e) {
      o.error = e.estimate - rep.truth;
      o.n_eff = e.n_eff;
      if (std::isfinite(e.variance)) {
        o.has_ci = true;
        o.covered = std::abs(o.error) <= z * std::sqrt(e.variance);
      }
    };
    std::optional<WeightSolution> rake, ml;
    std::optional<OutcomeModel> ridge, trees;
    auto check = [](const WeightSolution& w) {
      if (w.status != SolveStatus::converged) throw std::runtime_error("weights not converged: " + w.message);
    };
    if (cfg.raking)
      record("raking", [&](detail::RepOutcome& o) {
        rake = calibrate(design, t, CalibrationSpec::raking(cfg.bounds));
        check(*rake);
        with_ci(o, weighted_mean(*rake, t, "raking", cfg.alpha));
        const auto c = error_identities(rep, rake->gamma, nullptr);
        ident[r].weighting = std::max(ident[r].weighting, c.weighting);
      });
    if (cfg.multilevel)
      record("multilevel", [&](detail::RepOutcome& o) {
        ml = calibrate(design, t,
                       CalibrationSpec::multilevel(cfg.multilevel_order, cfg.multilevel_lambda / N, cfg.bounds));
        check(*ml);
        with_ci(o, weighted_mean(*ml, t, "multilevel", cfg.alpha));
        const auto c = error_identities(rep, ml->gamma, nullptr);
        ident[r].weighting = std::max(ident[r].weighting, c.weighting);
      });
    if (cfg.poststrat)
      record("poststrat", [&](detail::RepOutcome& o) { with_ci(o, weighted_mean(poststrat_weights(t), t, "poststrat")); });
    if (cfg.ridge) {
      record("mrp_ridge", [&](detail::RepOutcome& o) {
        ridge = fit_ridge(design, t, cfg.ridge_order, cfg.ridge_penalty);
        o.error = mrp_estimate(*ridge, t).estimate - rep.truth;
      });
      auto drp = [&](const std::optional<WeightSolution>& w, detail::RepOutcome& o) {
        if (!w || w->status != SolveStatus::converged) throw std::runtime_error("weights unavailable");
        if (!ridge) throw std::runtime_error("outcome model unavailable");
        with_ci(o, drp_estimate(*ridge, w->gamma, t, cfg.alpha));
        const auto c = error_identities(rep, w->gamma, &*ridge);
        ident[r].drp = std::max(ident[r].drp, c.drp);
      };
      if (cfg.raking) record("drp_ridge_raking", [&](detail::RepOutcome& o) { drp(rake, o); });
      if (cfg.multilevel) record("drp_ridge_multilevel", [&](detail::RepOutcome& o) { drp(ml, o); });
    }
    if (cfg.trees) {
      record("mrp_trees", [&](detail::RepOutcome& o) {
        auto opt = cfg.tree_options;
        opt.seed = mix_seed(opt.seed, r);
        trees = fit_bagged_trees(t, opt);
        o.error = mrp_estimate(*trees, t).estimate - rep.truth;
      });
      if (cfg.raking)
        record("drp_trees_raking", [&](detail::RepOutcome& o) {
          if (!rake || rake->status != SolveStatus::converged || !trees) throw std::runtime_error("inputs unavailable");
          with_ci(o, drp_estimate(*trees, rake->gamma, t, cfg.alpha));
        });
    }
    record("oracle_ht", [&](detail::RepOutcome& o) { o.error = oracle_ht(t, pi) - rep.truth; });
    for (std::size_t e = 0; e < E; ++e) out[r][e] = res.at(names[e]);
  }, max_threads);

  SimResult sim;
  sim.seed = seed;
  sim.replications = R;
  sim.pi_min = kInf;
  const auto pop_counts = pop.table().pop_counts;
  for (std::size_t s = 0; s < pi.size(); ++s)
    if (pop_counts[s] > 0) sim.pi_min = std::min(sim.pi_min, pi[s]);
  CompensatedSum nr;
  for (std::size_t r = 0; r < R; ++r) {
    nr.add(nresp[r]);
    sim.max_weighting_identity_residual = std::max(sim.max_weighting_identity_residual, ident[r].weighting);
    sim.max_drp_identity_residual = std::max(sim.max_drp_identity_residual, ident[r].drp);
  }
  sim.mean_respondents = nr.value() / static_cast<double>(R);
  for (std::size_t e = 0; e < E; ++e) {
    EstimatorSummary s;
    s.name = names[e];
    CompensatedSum err, sq, neff;
    std::size_t ci_n = 0, covered = 0, neff_n = 0;
    for (std::size_t r = 0; r < R; ++r) {
      const auto& o = out[r][e];
      if (!o.ok) {
        if (s.failures == 0) s.first_failure = o.failure;
        ++s.failures;
        continue;
      }
      ++s.replications;
      err.add(o.error);
      sq.add(o.error * o.error);
      if (o.has_ci) {
        ++ci_n;
        covered += o.covered ? 1 : 0;
      }
      if (std::isfinite(o.n_eff)) {
        ++neff_n;
        neff.add(o.n_eff);
      }
    }
    if (s.replications > 0) {
      const double m = static_cast<double>(s.replications);
      s.bias = err.value() / m;
      s.rmse = std::sqrt(sq.value() / m);
      const double var = std::max(0.0, sq.value() / m - s.bias * s.bias);
      s.bias_se = std::sqrt(var / m);
      if (ci_n > 0) s.coverage = static_cast<double>(covered) / static_cast<double>(ci_n);
      if (neff_n > 0) s.mean_n_eff = neff.value() / static_cast<double>(neff_n);
    } else {
      s.bias = s.rmse = s.bias_se = std::numeric_limits<double>::quiet_NaN();
    }
    sim.estimators.push_back(std::move(s));
  }
  return sim;
}

/// Cross-validated ridge penalty on one pilot draw; used to fix the penalty
/// for a whole simulation run.
inline CrossValidation pilot_ridge_penalty(const Population& pop, std::span<const double> pi,
                                           const InteractionDesign& design, std::size_t order, std::uint64_t seed,
                                           bool resample = true) {
  const auto rep = draw_replicate(pop, pi, seed, resample);
  return *fit_ridge_cv(design, rep.table, order, {}, 5, seed).cv;
}

// ---------------------------------------------------------------- balance bound

struct BalanceBoundReport {
  std::size_t draws = 0;
  std::size_t violations = 0;
  double kappa = 0.0;
  double max_ratio = 0.0;  // lhs / rhs over draws with rhs > 0
  double pi_min = 0.0;
  std::vector<double> lhs, rhs;
};

/// For each respondent draw from the fixed population, compares
/// |n gamma_hat - N^P|_2 from the [0,1]-box problem with kappa |n / pi - N^P|_2.
inline BalanceBoundReport balance_bound_check(const Population& pop, std::span<const double> pi, std::size_t draws,
                                 std::uint64_t seed) {
  InteractionDesign design(pop.schema, pop.schema.num_covariates());
  BalanceBoundReport rep;
  rep.draws = draws;
  rep.kappa = design_diagnostics(design).condition_number;
  const auto base = pop.table();
  rep.pi_min = kInf;
  for (std::size_t s = 0; s < pi.size(); ++s)
    if (base.pop_counts[s] > 0) rep.pi_min = std::min(rep.pi_min, pi[s]);
  for (std::size_t d = 0; d < draws; ++d) {
    const auto r = draw_replicate(pop, pi, mix_seed(seed, d), false);
    const auto& t = r.table;
    const auto sol = solve_unregularized(design, t, 0.0, 1.0);
    CompensatedSum a, b;
    for (std::size_t s = 0; s < t.num_cells(); ++s) {
      const double n = t.resp_counts[s];
      const double x = n * (n > 0 ? sol.gamma[s] : 0.0) - t.pop_counts[s];
      const double y = (t.pop_counts[s] > 0 ? n / pi[s] : 0.0) - t.pop_counts[s];
      a.add(x * x);
      b.add(y * y);
    }
    const double lhs = std::sqrt(a.value()), rhs = rep.kappa * std::sqrt(b.value());
    rep.lhs.push_back(lhs);
    rep.rhs.push_back(rhs);
    if (lhs > rhs * (1 + 1e-9) + 1e-9) ++rep.violations;
    if (rhs > 0) rep.max_ratio = std::max(rep.max_ratio, lhs / rhs);
  }
  return rep;
}

// ---------------------------------------------------------------- population regression

struct PopulationRegression {
  std::vector<double> eta;
  std::vector<double> order_norms;  // |eta_k|_2
};

/// Least squares of unit outcomes on the design columns of orders <= K.
inline PopulationRegression population_regression(const Population& pop, const InteractionDesign& design,
                                                  std::size_t order = 0) {
  if (order == 0) order = design.max_order();
  auto t = pop.table();
  t.resp_counts = t.pop_counts;
  t.resp_sums.emplace(t.num_cells(), 0.0);
  for (std::size_t i = 0; i < pop.size(); ++i) (*t.resp_sums)[pop.cells[i]] += pop.y[i];
  const auto cells = detail::respondent_cells(t);
  std::vector<double> w, y;
  for (auto s : cells) {
    w.push_back(t.pop_counts[s]);
    y.push_back(t.cell_mean(s));
  }
  detail::LinearSystem sys(design, order, cells, w, std::vector<double>(design.block_end(order), 0.0));
  PopulationRegression out;
  out.eta = sys.solve(sys.rhs_from(y));
  for (std::size_t k = 1; k <= order; ++k) {
    double ss = 0.0;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) ss += out.eta[j] * out.eta[j];
    out.order_norms.push_back(std::sqrt(ss));
  }
  return out;
}

/// Per-order bias contributions (1/N) eta_k . D^(k)T (n gamma - N^P).
inline std::vector<double> bias_by_order(std::span<const double> eta, std::span<const double> gamma,
                                         const InteractionDesign& design, const CellTable& table) {
  std::vector<double> g(table.num_cells());
  for (std::size_t s = 0; s < g.size(); ++s) g[s] = table.resp_counts[s] > 0 ? gamma[s] : 0.0;
  const auto imb = imbalance_vector(design, table, g);
  const double N = table.population_size();
  std::vector<double> out;
  for (std::size_t k = 1; k <= design.max_order() && design.block_end(k) <= eta.size(); ++k) {
    CompensatedSum acc;
    for (std::size_t j = design.block_begin(k); j < design.block_end(k); ++j) acc.add(eta[j] * imb[j]);
    out.push_back(acc.value() / N);
  }
  return out;
}

// ---------------------------------------------------------------- scenario builders

struct Scenario {
  std::string name;
  Population population;
  std::vector<double> pi;
  std::vector<double> response_coefficients;
  std::vector<double> outcome_coefficients;
};

struct FourthOrderConfig {
  std::size_t population_size = 50000;
  double response_scale = 3.0;
  double response_rate = 0.1;
  double outcome_scale = 3.0;
  double correlation = 0.5;  // between response and outcome coefficients on orders >= 2
  std::vector<double> tau{0.25, 0.15, 0.1, 0.06};
  std::uint64_t seed = 2016;
};

inline std::vector<std::vector<double>> election_marginals(const CovariateSchema& schema) {
  std::vector<std::vector<double>> m;
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    std::vector<double> p;
    const std::size_t L = schema.levels()[c];
    for (std::size_t l = 0; l < L; ++l) p.push_back(1.0 + 0.6 * std::sin(1.3 * static_cast<double>(l + c) + 0.4));
    m.push_back(p);
  }
  return m;
}

/// Fourth-order logistic response and outcome models on a schema; the
/// design passed in must be built to order >= 4 (or the schema's d).
inline Scenario fourth_order_scenario(const InteractionDesign& design, const FourthOrderConfig& cfg) {
  const auto& schema = design.schema();
  const std::size_t K = std::min<std::size_t>(4, design.max_order());
  std::vector<PairTilt> tilts;
  if (schema.num_covariates() >= 2) tilts.push_back({0, 1, 1.0});
  if (schema.num_covariates() >= 6) tilts.push_back({2, 5, -0.8});
  const auto probs = cell_probabilities(schema, election_marginals(schema), tilts);
  auto beta = random_coefficients(design, K, cfg.tau, 1.0, mix_seed(cfg.seed, 11));
  auto indep = random_coefficients(design, K, cfg.tau, 1.0, mix_seed(cfg.seed, 12));
  std::vector<double> eta(beta.size());
  const double rho = cfg.correlation;
  for (std::size_t j = 0; j < eta.size(); ++j)
    eta[j] = j >= design.block_end(1) ? rho * beta[j] + std::sqrt(1 - rho * rho) * indep[j] : indep[j];
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::logistic;
  os.coefficients = eta;
  os.scale = cfg.outcome_scale;
  os.redraw = true;
  Scenario sc;
  sc.name = "fourth-order";
  sc.population = gen_population(design, cfg.population_size, probs, os, mix_seed(cfg.seed, 13));
  tune_intercept(design, beta, cfg.response_scale, sc.population.table().pop_counts, cfg.response_rate);
  sc.pi = response_logit(design, beta, cfg.response_scale);
  sc.response_coefficients = beta;
  sc.outcome_coefficients = eta;
  return sc;
}

struct CoverageConfig {
  std::size_t population_size = 20000;
  double response_rate = 0.3;
  double response_scale = 1.0;
  double noise_sd = 1.0;
  std::uint64_t seed = 7;
};

/// Well-specified linear outcome on the small preset with moderate overlap.
inline Scenario coverage_scenario(const InteractionDesign& design, const CoverageConfig& cfg) {
  const auto& schema = design.schema();
  const std::size_t K = design.max_order();
  const auto probs = cell_probabilities(schema, election_marginals(schema));
  auto beta = random_coefficients(design, K, {0.6, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1}, 1.0, mix_seed(cfg.seed, 21));
  auto eta = random_coefficients(design, K, {1.0, 0.5, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1}, 1.0, mix_seed(cfg.seed, 22));
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::linear;
  os.coefficients = eta;
  os.noise_sd = cfg.noise_sd;
  os.redraw = true;
  Scenario sc;
  sc.name = "coverage";
  sc.population = gen_population(design, cfg.population_size, probs, os, mix_seed(cfg.seed, 23));
  tune_intercept(design, beta, cfg.response_scale, sc.population.table().pop_counts, cfg.response_rate);
  sc.pi = response_logit(design, beta, cfg.response_scale);
  sc.response_coefficients = beta;
  sc.outcome_coefficients = eta;
  return sc;
}

}  // namespace mlcal
