#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "mlcal/simlab.hpp"
#include "support.hpp"

using namespace mlcal;

namespace {

CovariateSchema s243() { return CovariateSchema::from_levels({2, 4, 3}); }

Scenario small_scenario(std::size_t N = 5000, double rate = 0.3, double scale = 1.0) {
  static const InteractionDesign design(small_preset_schema(), 3);
  CoverageConfig cfg;
  cfg.population_size = N;
  cfg.response_rate = rate;
  cfg.response_scale = scale;
  return coverage_scenario(design, cfg);
}

}  // namespace

TEST(GenPopulation, UniformCellsStayInBinomialBand) {
  InteractionDesign d(s243(), 1);
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::reference_indicator;
  const auto pop = gen_population(d, 2400, uniform_cell_probabilities(d.schema()), os, 3);
  const auto t = pop.table();
  const double sd = std::sqrt(2400.0 * (1.0 / 24) * (23.0 / 24));
  for (double c : t.pop_counts) EXPECT_LT(std::abs(c - 100.0), 5 * sd);
  EXPECT_EQ(t.population_size(), 2400.0);
}

TEST(GenPopulation, ReferenceIndicatorMeansAreBinary) {
  InteractionDesign d(s243(), 1);
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::reference_indicator;
  const auto pop = gen_population(d, 4800, uniform_cell_probabilities(d.schema()), os, 5);
  const auto mu = pop.cell_means();
  for (std::size_t s = 0; s < mu.size(); ++s) {
    if (std::isnan(mu[s])) continue;
    EXPECT_EQ(mu[s], s == 0 ? 1.0 : 0.0);
  }
}

TEST(GenPopulation, LogisticSignalMatchesDirectEvaluation) {
  InteractionDesign d(s243(), 3);
  const auto eta = random_coefficients(d, 3, {1.0, 0.5, 0.2}, 1.0, 17);
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::logistic;
  os.coefficients = eta;
  const auto pop = gen_population(d, 1000, uniform_cell_probabilities(d.schema()), os, 9);
  const auto D = d.dense();
  for (std::size_t s = 0; s < d.num_rows(); ++s) {
    double z = 0;
    for (std::size_t j = 0; j < eta.size(); ++j) z += D(s, j) * eta[j];
    EXPECT_NEAR(pop.cell_signal[s], 1.0 / (1.0 + std::exp(-z)), 1e-14);
  }
}

TEST(GenPopulation, DeterministicAndValidated) {
  InteractionDesign d(s243(), 1);
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::reference_indicator;
  const auto p = uniform_cell_probabilities(d.schema());
  const auto a = gen_population(d, 500, p, os, 11), b = gen_population(d, 500, p, os, 11);
  EXPECT_EQ(a.cells, b.cells);
  EXPECT_EQ(a.y, b.y);
  auto bad = p;
  bad[3] = -0.1;
  EXPECT_THROW(gen_population(d, 500, bad, os, 1), std::invalid_argument);
  bad[3] = std::nan("");
  EXPECT_THROW(gen_population(d, 500, bad, os, 1), std::invalid_argument);
  EXPECT_THROW(gen_population(d, 500, std::vector<double>(5, 0.2), os, 1), std::invalid_argument);
}

TEST(ResponseLogit, ClosedFormCases) {
  InteractionDesign d(s243(), 2);
  std::vector<double> beta(d.block_end(2), 0.0);
  for (double p : response_logit(d, beta)) EXPECT_EQ(p, 0.5);
  beta[0] = -2;
  for (double p : response_logit(d, beta)) EXPECT_NEAR(p, 0.11920292202211755, 1e-15);
  EXPECT_THROW(response_logit(d, std::vector<double>(3, 0.0)), std::invalid_argument);
}

TEST(ResponseLogit, LargerScaleWorsensOverlap) {
  InteractionDesign d(s243(), 3);
  const auto beta = random_coefficients(d, 3, {0.8, 0.4, 0.2}, 1.0, 4);
  double prev = 1.0;
  for (double scale : {0.5, 1.0, 2.0, 4.0}) {
    const auto pi = response_logit(d, beta, scale);
    const double lo = *std::min_element(pi.begin(), pi.end());
    EXPECT_LT(lo, prev);
    prev = lo;
  }
}

TEST(ResponseLogit, TunedInterceptHitsRate) {
  InteractionDesign d(s243(), 3);
  auto beta = random_coefficients(d, 3, {0.8, 0.4, 0.2}, 1.0, 4);
  std::vector<double> pop(d.num_rows());
  for (std::size_t s = 0; s < pop.size(); ++s) pop[s] = 10.0 + static_cast<double>(s % 7);
  tune_intercept(d, beta, 2.0, pop, 0.15);
  const auto pi = response_logit(d, beta, 2.0);
  double num = 0, den = 0;
  for (std::size_t s = 0; s < pi.size(); ++s) {
    num += pop[s] * pi[s];
    den += pop[s];
  }
  EXPECT_NEAR(num / den, 0.15, 1e-12);
  EXPECT_THROW(tune_intercept(d, beta, 1.0, pop, 1.0), std::invalid_argument);
}

TEST(ResponseForest, RootOnlyIsConstant) {
  const auto schema = CovariateSchema::from_levels({2, 2});
  CellTable ref{schema, {100, 200, 100, 100}, {10, 60, 30, 20}, std::nullopt, std::nullopt};
  const auto f = response_forest(ref, TreeOptions{1, 0, 1, 1.0, false});
  for (double p : f.pi) EXPECT_NEAR(p, 120.0 / 500.0, 1e-15);
  EXPECT_EQ(f.clipped, 0u);
}

TEST(ResponseForest, StumpSplitsIntoTwoConstants) {
  const auto schema = CovariateSchema::from_levels({2, 2});
  CellTable ref{schema, {100, 100, 100, 100}, {10, 10, 50, 50}, std::nullopt, std::nullopt};
  const auto f = response_forest(ref, TreeOptions{1, 1, 1, 1.0, false});
  EXPECT_NEAR(f.pi[0], 0.1, 1e-15);
  EXPECT_NEAR(f.pi[1], 0.1, 1e-15);
  EXPECT_NEAR(f.pi[2], 0.5, 1e-15);
  EXPECT_NEAR(f.pi[3], 0.5, 1e-15);
}

TEST(ResponseForest, ZeroLeavesAreClipped) {
  const auto schema = CovariateSchema::from_levels({2, 2});
  CellTable ref{schema, {100, 100, 100, 100}, {0, 0, 50, 50}, std::nullopt, std::nullopt};
  const auto f = response_forest(ref, TreeOptions{1, 1, 1, 1.0, false});
  EXPECT_EQ(f.clipped, 2u);
  EXPECT_EQ(f.pi[0], 1e-4);
  EXPECT_EQ(f.pi[1], 1e-4);
  for (double p : f.pi) EXPECT_GE(p, 0.0);
}

TEST(OracleHT, CensusIsExact) {
  const auto sc = small_scenario();
  const std::vector<double> one(sc.pi.size(), 1.0);
  const auto r = draw_replicate(sc.population, one, 3);
  EXPECT_NEAR(oracle_ht(r.table, one), r.truth, 1e-13);
}

TEST(OracleHT, TwoCellHandExample) {
  const auto schema = CovariateSchema::from_levels({2});
  CellTable t{schema, {10, 10}, {2, 5}, std::vector<double>{1, 4}, std::nullopt};
  // (1/20) (1 / 0.25 + 4 / 0.5) = 0.6
  EXPECT_NEAR(oracle_ht(t, std::vector<double>{0.25, 0.5}), 0.6, 1e-15);
}

TEST(OracleHT, EqualsWeightedMeanWithInversePropensity) {
  const auto sc = small_scenario();
  const auto r = draw_replicate(sc.population, sc.pi, 8);
  std::vector<double> g(sc.pi.size());
  for (std::size_t s = 0; s < g.size(); ++s) g[s] = 1.0 / sc.pi[s];
  EXPECT_NEAR(oracle_ht(r.table, sc.pi), weighted_mean_value(g, r.table), 1e-13);
}

TEST(OracleHT, UnbiasedWithinMonteCarloError) {
  const auto sc = small_scenario(5000, 0.3);
  SuiteConfig cfg;
  cfg.raking = cfg.multilevel = cfg.poststrat = cfg.ridge = false;
  const auto res = run_replications(sc.population, sc.pi, InteractionDesign(sc.population.schema, 3), cfg, 2000, 21);
  const auto& e = res.get("oracle_ht");
  EXPECT_EQ(e.replications, 2000u);
  EXPECT_LE(std::abs(e.bias), 3 * e.bias_se);
}

TEST(RunReplications, CensusGivesZeroError) {
  const auto sc = small_scenario(3000);
  const std::vector<double> one(sc.pi.size(), 1.0);
  InteractionDesign d(sc.population.schema, 3);
  SuiteConfig cfg;
  cfg.ridge_penalty = 0.0;
  cfg.trees = true;
  const auto res = run_replications(sc.population, one, d, cfg, 5, 2);
  for (const auto& e : res.estimators) {
    SCOPED_TRACE(e.name);
    if (e.name == "mrp_trees") continue;  // tree fit smooths across cells
    EXPECT_EQ(e.failures, 0u);
    EXPECT_LT(std::abs(e.bias), 1e-8);
    EXPECT_LT(e.rmse, 1e-8);
  }
  EXPECT_LT(std::abs(res.get("drp_trees_raking").bias), 1e-8);
}

TEST(RunReplications, IdentitiesHoldEveryReplication) {
  const auto sc = small_scenario(4000, 0.2, 1.5);
  InteractionDesign d(sc.population.schema, 3);
  const auto res = run_replications(sc.population, sc.pi, d, SuiteConfig{}, 40, 6);
  EXPECT_LT(res.max_weighting_identity_residual, 1e-10);
  EXPECT_LT(res.max_drp_identity_residual, 1e-10);
}

TEST(ErrorIdentities, HoldForArbitraryWeightsAndModels) {
  const auto sc = small_scenario(3000, 0.3);
  InteractionDesign d(sc.population.schema, 3);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1.0, 4.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto r = draw_replicate(sc.population, sc.pi, 100 + trial);
    std::vector<double> g(d.num_rows());
    for (auto& x : g) x = u(rng);
    const auto m = fit_ridge(d, r.table, 1 + trial % 3, 0.5 * trial);
    const auto c = error_identities(r, g, &m);
    EXPECT_LT(c.weighting, 1e-10);
    EXPECT_LT(c.drp, 1e-10);
  }
}

TEST(ErrorIdentities, TwoCellHandExample) {
  // N = (10, 10), mu = (0.2, 0.6), respondents (2, 5) with cell means (0.5, 0.8),
  // weights (4, 2), model predictions (0.3, 0.7).
  const auto schema = CovariateSchema::from_levels({2});
  Replicate r{CellTable{schema, {10, 10}, {2, 5}, std::vector<double>{1.0, 4.0}, std::vector<double>{0.5, 3.2}},
              {0.2, 0.6},
              0.4};
  const std::vector<double> g{4.0, 2.0};
  OutcomeModel m = constant_model(r.table, 0.0);
  m.predictions = {0.3, 0.7};
  // drp = (1/20)(10*0.3 + 10*0.7) + (1/20)(8*(0.5-0.3) + 10*(0.8-0.7)) = 0.5 + 0.13 = 0.63
  EXPECT_NEAR(drp_forms(m, g, r.table).weighting_form, 0.63, 1e-15);
  // imbalance term (1/20)[(8-10)(0.2-0.3) + (10-10)(0.6-0.7)] = 0.01
  // noise term     (1/20)[8*(0.5-0.2) + 10*(0.8-0.6)]          = 0.22
  const auto c = error_identities(r, g, &m);
  EXPECT_LT(c.drp, 1e-15);
  EXPECT_LT(c.weighting, 1e-15);
}

TEST(RunReplications, DeterministicReplayAcrossThreadCounts) {
  const auto sc = small_scenario(3000, 0.3);
  InteractionDesign d(sc.population.schema, 3);
  const auto a = run_replications(sc.population, sc.pi, d, SuiteConfig{}, 12, 77, 1);
  const auto b = run_replications(sc.population, sc.pi, d, SuiteConfig{}, 12, 77, 3);
  ASSERT_EQ(a.estimators.size(), b.estimators.size());
  for (std::size_t e = 0; e < a.estimators.size(); ++e) {
    EXPECT_EQ(a.estimators[e].name, b.estimators[e].name);
    EXPECT_EQ(std::memcmp(&a.estimators[e].bias, &b.estimators[e].bias, sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&a.estimators[e].rmse, &b.estimators[e].rmse, sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&a.estimators[e].coverage, &b.estimators[e].coverage, sizeof(double)), 0);
  }
}

TEST(RunReplications, RmseDominatesBias) {
  const auto sc = small_scenario(3000, 0.2, 1.5);
  InteractionDesign d(sc.population.schema, 3);
  const auto res = run_replications(sc.population, sc.pi, d, SuiteConfig{}, 30, 4);
  for (const auto& e : res.estimators)
    if (e.replications > 0) {
      EXPECT_GE(e.rmse * e.rmse - e.bias * e.bias, -1e-12);
    }
}

TEST(RunReplications, FailuresAreCountedNotFatal) {
  // Tiny response rate leaves cells empty, so post-stratification is infeasible.
  const auto sc = small_scenario(2000, 0.01, 1.0);
  InteractionDesign d(sc.population.schema, 3);
  SuiteConfig cfg;
  cfg.raking = cfg.multilevel = cfg.ridge = false;
  const auto res = run_replications(sc.population, sc.pi, d, cfg, 10, 4);
  const auto& ps = res.get("poststrat");
  EXPECT_GT(ps.failures, 0u);
  EXPECT_EQ(ps.failures + ps.replications, 10u);
  EXPECT_FALSE(ps.first_failure.empty());
  EXPECT_EQ(res.get("oracle_ht").replications, 10u);
  EXPECT_THROW(run_replications(sc.population, sc.pi, d, cfg, 0, 4), std::invalid_argument);
}

TEST(BalanceBound, CensusDrawHasZeroSides) {
  const auto sc = small_scenario(3000);
  const std::vector<double> one(sc.pi.size(), 1.0);
  const auto rep = balance_bound_check(sc.population, one, 1, 1);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_EQ(rep.rhs[0], 0.0);
  EXPECT_LT(rep.lhs[0], 1e-6);
}

TEST(BalanceBound, HoldsOnRandomDraws) {
  const auto sc = small_scenario(5000, 0.1, 1.0);
  const auto rep = balance_bound_check(sc.population, sc.pi, 100, 3);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_GE(rep.pi_min, 0.02);
  EXPECT_GT(rep.kappa, 1.0);
}

TEST(BalanceBound, HoldsUnderPoorOverlap) {
  const auto sc = small_scenario(5000, 0.05, 2.5);
  const auto rep = balance_bound_check(sc.population, sc.pi, 50, 9);
  EXPECT_LT(rep.pi_min, 0.005);
  EXPECT_EQ(rep.violations, 0u);
}

TEST(PopulationRegression, FirstOrderTruthHasNoInteractions) {
  InteractionDesign d1(s243(), 1), d3(s243(), 3);
  OutcomeSpec os;
  os.kind = OutcomeSpec::Kind::linear;
  os.coefficients = random_coefficients(d1, 1, {1.0}, 1.0, 3);
  os.coefficients[0] = 0.4;
  os.noise_sd = 0.0;
  const auto pop = gen_population(d3, 2400, uniform_cell_probabilities(d3.schema()), os, 2);
  const auto fit = population_regression(pop, d3);
  ASSERT_EQ(fit.order_norms.size(), 3u);
  EXPECT_GT(fit.order_norms[0], 0.1);
  EXPECT_LT(fit.order_norms[1], 1e-9);
  EXPECT_LT(fit.order_norms[2], 1e-9);
  for (std::size_t j = 0; j < d1.block_end(1); ++j) EXPECT_NEAR(fit.eta[j], os.coefficients[j], 1e-9);
}

TEST(PopulationRegression, SaturatedFitReproducesCellMeans) {
  const auto sc = small_scenario(5000);
  InteractionDesign d(sc.population.schema, 3);
  const auto fit = population_regression(sc.population, d);
  const auto mu = sc.population.cell_means();
  for (std::size_t s = 0; s < mu.size(); ++s) {
    ASSERT_FALSE(std::isnan(mu[s]));
    EXPECT_NEAR(d.row_dot(s, fit.eta, 3), mu[s], 1e-9);
  }
}

TEST(PopulationRegression, OrderBiasesSumToImbalanceTerm) {
  const auto sc = small_scenario(5000, 0.2, 1.5);
  InteractionDesign d(sc.population.schema, 3);
  const auto fit = population_regression(sc.population, d);
  auto t = sc.population.table();
  const auto r = draw_replicate(sc.population, sc.pi, 5, false);
  t.resp_counts = r.table.resp_counts;
  const auto w = calibrate(d, t, CalibrationSpec::raking());
  const auto parts = bias_by_order(fit.eta, w.gamma, d, t);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_LT(std::abs(parts[0]), 1e-8);
  const auto mu = sc.population.cell_means();
  double direct = 0;
  for (std::size_t s = 0; s < mu.size(); ++s)
    direct += (t.resp_counts[s] * (t.resp_counts[s] > 0 ? w.gamma[s] : 0.0) - t.pop_counts[s]) * mu[s];
  direct /= t.population_size();
  EXPECT_NEAR(parts[0] + parts[1] + parts[2], direct, 1e-10);
}

TEST(Scenarios, FourthOrderPresetShape) {
  const auto schema = election_preset_schema();
  EXPECT_EQ(schema.num_cells(), 51840u);
  InteractionDesign d(schema, 4);
  FourthOrderConfig cfg;
  cfg.population_size = 20000;
  const auto sc = fourth_order_scenario(d, cfg);
  const auto t = sc.population.table();
  double num = 0;
  for (std::size_t s = 0; s < sc.pi.size(); ++s) {
    EXPECT_GT(sc.pi[s], 0.0);
    EXPECT_LT(sc.pi[s], 1.0);
    num += t.pop_counts[s] * sc.pi[s];
  }
  EXPECT_NEAR(num / t.population_size(), cfg.response_rate, 1e-10);
  const auto again = fourth_order_scenario(d, cfg);
  EXPECT_EQ(again.pi, sc.pi);
  EXPECT_EQ(again.population.y, sc.population.y);
}

TEST(Scenarios, RandomCoefficientsLayout) {
  InteractionDesign d(s243(), 3);
  const auto b = random_coefficients(d, 2, {1.0, 0.5}, 2.0, 1);
  EXPECT_EQ(b.size(), d.block_end(2));
  EXPECT_EQ(b[0], 0.0);
  EXPECT_THROW(random_coefficients(d, 3, {1.0}, 1.0, 1), std::invalid_argument);
}

TEST(Scenarios, PilotPenaltyIsOnGrid) {
  const auto sc = small_scenario(5000);
  InteractionDesign d(sc.population.schema, 3);
  const auto cv = pilot_ridge_penalty(sc.population, sc.pi, d, 3, 4);
  EXPECT_NE(std::find(cv.grid.begin(), cv.grid.end(), cv.selected), cv.grid.end());
  EXPECT_EQ(cv.loss.size(), cv.grid.size());
}
