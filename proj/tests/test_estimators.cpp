#include <gtest/gtest.h>

#include <random>

#include "mlcal/estimators.hpp"
#include "support.hpp"

using namespace mlcal;
using mltest::random_feasible_table;
using mltest::random_table;

namespace {

CellTable two_cell() {
  const auto schema = CovariateSchema::from_levels({2});
  return CellTable{schema, {60, 40}, {10, 10}, std::vector<double>{10, 0}, std::vector<double>{10, 0}};
}

std::vector<double> uniform_weights(const CellTable& t) {
  return std::vector<double>(t.num_cells(), t.population_size() / t.respondent_size());
}

}  // namespace

TEST(WeightedMean, TwoCellHandValue) {
  const auto t = two_cell();
  const std::vector<double> g{6, 4};
  EXPECT_DOUBLE_EQ(weighted_mean_value(g, t), 0.6);
}

TEST(WeightedMean, UniformIsSampleMean) {
  std::mt19937_64 rng(1);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.2, 60, true);
  CompensatedSum y;
  for (double v : *t.resp_sums) y.add(v);
  EXPECT_NEAR(weighted_mean_value(uniform_weights(t), t), y.value() / t.respondent_size(), 1e-14);
}

TEST(WeightedMean, PoststratIsCellSizeAverage) {
  std::mt19937_64 rng(2);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.0, 60, true);
  const auto w = poststrat_weights(t);
  CompensatedSum ref;
  for (std::size_t s = 0; s < t.num_cells(); ++s) ref.add(t.pop_counts[s] / t.population_size() * t.cell_mean(s));
  EXPECT_NEAR(weighted_mean_value(w.gamma, t), ref.value(), 1e-14);
}

TEST(WeightedMean, MissingOutcomes) {
  auto t = two_cell();
  t.resp_sums.reset();
  EXPECT_THROW(weighted_mean_value(std::vector<double>{6, 4}, t), std::invalid_argument);
}

TEST(Poststrat, TwoCell) {
  const auto w = poststrat_weights(two_cell());
  EXPECT_EQ(w.gamma, (std::vector<double>{6, 4}));
}

TEST(Poststrat, EmptyCellListed) {
  CovariateSchema s({{"sex", {"m", "f"}}});
  CellTable t{s, {60, 40}, {10, 0}, std::nullopt, std::nullopt};
  try {
    poststrat_weights(t);
    FAIL();
  } catch (const InfeasibleError& e) {
    EXPECT_NE(std::string(e.what()).find("[sex=f]"), std::string::npos);
  }
}

TEST(Poststrat, CollapsedSchema) {
  // cell (1,1) is empty, so full post-stratification fails but collapsing onto covariate 0 works
  const auto schema = CovariateSchema::from_levels({2, 2});
  CellTable t{schema, {10, 20, 30, 40}, {2, 3, 5, 0}, std::vector<double>{1, 2, 3, 0}, std::nullopt};
  EXPECT_THROW(poststrat_weights(t), InfeasibleError);
  const std::vector<std::size_t> keep{0};
  const auto w = collapsed_poststrat_weights(t, keep);
  EXPECT_DOUBLE_EQ(w.gamma[0], 30.0 / 5.0);
  EXPECT_DOUBLE_EQ(w.gamma[1], 30.0 / 5.0);
  EXPECT_DOUBLE_EQ(w.gamma[2], 70.0 / 5.0);
  EXPECT_DOUBLE_EQ(w.gamma[3], 0.0);
}

TEST(Mrp, ConstantModel) {
  std::mt19937_64 rng(3);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.3, 60, true);
  EXPECT_DOUBLE_EQ(mrp_estimate(constant_model(t, 0.37), t).estimate, 0.37);
}

TEST(Mrp, CellMeansEqualPoststrat) {
  std::mt19937_64 rng(4);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.0, 60, true);
  const auto m = smoother_predict(diagonal_smoother(t), t);
  EXPECT_NEAR(mrp_estimate(m, t).estimate, weighted_mean_value(poststrat_weights(t).gamma, t), 1e-14);
}

TEST(Mrp, LinearModelUsesPopulationFeatureMeans) {
  std::mt19937_64 rng(5);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_table(schema, rng, 0.2, 60, true);
  const auto m = fit_ridge(d, t, 2, 1.5);
  const auto feat = d.transpose_times(t.pop_counts, 2);
  EXPECT_NEAR(mrp_estimate(m, t).estimate, dot(m.coefficients, feat) / t.population_size(), 1e-12);
}

TEST(Mrp, UndefinedPredictionIsError) {
  std::mt19937_64 rng(6);
  const auto t = random_table(CovariateSchema::from_levels({3, 3}), rng, 0.4, 60, true);
  const auto m = smoother_predict(diagonal_smoother(t), t);
  EXPECT_THROW(mrp_estimate(m, t), std::invalid_argument);
}

TEST(Bias, ZeroUnderPoststrat) {
  std::mt19937_64 rng(7);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_table(schema, rng, 0.0, 60, true);
  EXPECT_EQ(bias_estimate(fit_ridge(d, t, 3, 2.0), poststrat_weights(t).gamma, t), 0.0);
}

TEST(Bias, ConstantModelWithBalancedIntercept) {
  std::mt19937_64 rng(8);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 1);
  const auto t = random_feasible_table(schema, rng, 0.2, 60, true);
  const auto w = calibrate(d, t, CalibrationSpec::raking());
  EXPECT_NEAR(bias_estimate(constant_model(t, 2.5), w.gamma, t), 0.0, 1e-9);
}

TEST(Bias, HandValue) {
  const auto t = two_cell();
  OutcomeModel m = constant_model(t, 0.0);
  m.predictions = {0.5, 2.0};
  // (1/100) * (0.5*(60-10*5) + 2*(40-10*5)) = (5 - 20)/100
  EXPECT_DOUBLE_EQ(bias_estimate(m, std::vector<double>{5, 5}, t), -0.15);
}

TEST(Drp, PoststratEqualsWeighting) {
  std::mt19937_64 rng(9);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_table(schema, rng, 0.0, 60, true);
  const auto w = poststrat_weights(t);
  const auto r = drp_estimate(fit_ridge(d, t, 2, 4.0), w.gamma, t);
  EXPECT_NEAR(r.estimate, weighted_mean_value(w.gamma, t), 1e-14);
}

TEST(Drp, SaturatedModelEqualsMrp) {
  std::mt19937_64 rng(10);
  const auto schema = CovariateSchema::from_levels({2, 3, 2});
  InteractionDesign d(schema, 3);
  const auto t = random_table(schema, rng, 0.0, 60, true);
  const auto m = fit_map_linear(d, t, PriorCovariance{{0, 0, 0}});
  EXPECT_NEAR(drp_estimate(m, uniform_weights(t), t).estimate, mrp_estimate(m, t).estimate, 1e-12);
}

TEST(Drp, ZeroModelIsWeighting) {
  std::mt19937_64 rng(11);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.2, 60, true);
  const auto g = uniform_weights(t);
  EXPECT_DOUBLE_EQ(drp_estimate(constant_model(t, 0.0), g, t).estimate, weighted_mean_value(g, t));
}

TEST(Drp, FormsAgreeOnRandomInstances) {
  std::mt19937_64 rng(12);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  for (int rep = 0; rep < 25; ++rep) {
    const auto t = random_feasible_table(schema, rng, 0.25, 60, true);
    const auto w = calibrate(d, t, CalibrationSpec::multilevel(3, 0.05));
    const auto m = fit_ridge(d, t, 3, 1.0);
    const auto f = drp_forms(m, w.gamma, t);
    EXPECT_LE(std::abs(f.weighting_form - f.model_form), 1e-12 * std::abs(f.model_form));
  }
}

TEST(Variance, ZeroResiduals) {
  const auto schema = CovariateSchema::from_levels({2});
  CellTable t{schema, {60, 40}, {10, 10}, std::vector<double>{20, 30}, std::vector<double>{40, 90}};
  const auto m = smoother_predict(diagonal_smoother(t), t);
  const auto v = variance_ci(m, std::vector<double>{6, 4}, t);
  EXPECT_EQ(v.variance, 0.0);
  EXPECT_EQ(v.lower, v.upper);
}

TEST(Variance, SingleCellFiveUnits) {
  const auto schema = CovariateSchema::from_levels({2});
  const std::vector<double> y{1, 2, 4, 4, 9};
  double sum = 0, sq = 0;
  for (double v : y) sum += v, sq += v * v;
  CellTable t{schema, {20, 0}, {5, 0}, std::vector<double>{sum, 0}, std::vector<double>{sq, 0}};
  OutcomeModel m = constant_model(t, 3.0);
  const std::vector<double> g{4, 0};
  double ref = 0;
  for (double v : y) ref += 16 * (v - 3) * (v - 3);
  ref /= 400;
  const auto v = variance_ci(m, g, t);
  EXPECT_NEAR(v.variance, ref, 1e-14);
  const double est = drp_estimate(m, g, t).estimate;
  EXPECT_NEAR(v.upper - est, 1.959963984540054 * std::sqrt(ref), 1e-12);
}

TEST(Variance, QuantileAtDefaultAlpha) {
  EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-9);
  EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-15);
  EXPECT_NEAR(normal_quantile(0.995), 2.5758293035489, 1e-9);
}

TEST(Variance, MissingSecondMoments) {
  auto t = two_cell();
  t.resp_sumsq.reset();
  EXPECT_THROW(variance_ci(constant_model(t, 0.0), std::vector<double>{6, 4}, t), std::invalid_argument);
}

TEST(EffectiveSampleSize, Uniform) {
  std::mt19937_64 rng(13);
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.2, 60);
  const auto ss = effective_sample_size(uniform_weights(t), t);
  EXPECT_NEAR(ss.n_eff, t.respondent_size(), 1e-9);
  EXPECT_NEAR(ss.design_effect, 1.0, 1e-12);
}

TEST(EffectiveSampleSize, TwoCellHandValue) {
  const auto ss = effective_sample_size(std::vector<double>{6, 4}, two_cell());
  EXPECT_NEAR(ss.n_eff, 10000.0 / 520.0, 1e-12);
}

TEST(EffectiveSampleSize, PerturbationLowersNeff) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> z;
  const auto t = random_table(CovariateSchema::from_levels({2, 4, 3}), rng, 0.0, 60);
  for (int rep = 0; rep < 20; ++rep) {
    auto g = uniform_weights(t);
    // move weight mass between two cells keeping sum n gamma fixed
    const std::size_t a = rep % 24, b = (rep + 7) % 24;
    const double d = 0.3 * std::abs(z(rng)) + 0.01;
    g[a] += d / t.resp_counts[a];
    g[b] -= d / t.resp_counts[b];
    EXPECT_LT(effective_sample_size(g, t).n_eff, t.respondent_size());
  }
}

TEST(Imbalance, PoststratAllZero) {
  std::mt19937_64 rng(15);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_table(schema, rng, 0.0, 60);
  const auto r = imbalance_report(poststrat_weights(t).gamma, d, t);
  for (double v : r.relative_norm) EXPECT_LT(v, 1e-14);
  EXPECT_TRUE(r.skipped_columns.empty());
}

TEST(Imbalance, RakingZeroFirstOrderOnly) {
  std::mt19937_64 rng(16);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_feasible_table(schema, rng, 0.2, 60);
  const auto rake = calibrate(d, t, CalibrationSpec::raking());
  const auto r = imbalance_report(rake.gamma, d, t);
  EXPECT_LT(r.relative_norm[0], 1e-9);
  EXPECT_GT(r.relative_norm[1], 1e-4);
  const auto ml = calibrate(d, t, CalibrationSpec::multilevel(3, 0.01));
  EXPECT_LE(higher_order_imbalance(ml.gamma, d, t), higher_order_imbalance(rake.gamma, d, t));
}

TEST(Imbalance, ZeroCountColumnsFlagged) {
  const auto schema = CovariateSchema::from_levels({2, 2});
  InteractionDesign d(schema, 2);
  CellTable t{schema, {10, 20, 30, 0}, {2, 3, 5, 0}, std::nullopt, std::nullopt};
  const auto r = imbalance_report(std::vector<double>{5, 5, 5, 0}, d, t);
  ASSERT_EQ(r.skipped_columns, (std::vector<std::size_t>{3}));
  EXPECT_TRUE(std::isnan(r.relative[1][0]));
}

TEST(Imbalance, MseTermsByDirectSum) {
  const auto t = two_cell();
  InteractionDesign d(t.schema, 1);
  const std::vector<double> g{5, 5};
  const std::vector<double> mu{1, 0};
  const auto r = imbalance_report(g, d, t, mu);
  EXPECT_DOUBLE_EQ(r.cell_imbalance_sq, 100 + 100);
  EXPECT_DOUBLE_EQ(r.noise_factor, 2 * 0.25);
  EXPECT_DOUBLE_EQ(*r.bias_bound, 1.0 * 200 / 10000);
}

TEST(Sweep, MonotoneOnRandomInstances) {
  std::mt19937_64 rng(17);
  for (auto levels : std::vector<std::vector<std::size_t>>{{2, 4, 3}, {2, 2, 2}}) {
    const auto schema = CovariateSchema::from_levels(std::span<const std::size_t>(levels));
    InteractionDesign d(schema, levels.size());
    for (int rep = 0; rep < 5; ++rep) {
      const auto t = random_feasible_table(schema, rng, 0.2, 60);
      const auto c = sweep_tradeoff(d, t, default_lambda_grid(t.num_cells()), levels.size());
      ASSERT_EQ(c.points.size(), 25u);
      for (const auto& p : c.points) EXPECT_TRUE(p.converged) << p.message;
      EXPECT_TRUE(c.imbalance_monotone);
      EXPECT_TRUE(c.weights_monotone);
      EXPECT_LE(c.points.back().imbalance_sq, c.raking_imbalance_sq);
      // the largest lambda is close to raking
      EXPECT_NEAR(c.points.front().imbalance_sq, c.raking_imbalance_sq, 1e-3 * (1 + c.raking_imbalance_sq));
    }
  }
}

TEST(Sweep, SelectionRuleRecomputed) {
  std::mt19937_64 rng(18);
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  InteractionDesign d(schema, 3);
  const auto t = random_feasible_table(schema, rng, 0.2, 60);
  const auto c = sweep_tradeoff(d, t, default_lambda_grid(t.num_cells()), 3);
  ASSERT_TRUE(c.selected.has_value());
  const double full = c.raking_imbalance_sq - c.points.back().imbalance_sq;
  std::size_t expect = 0;
  while (c.raking_imbalance_sq - c.points[expect].imbalance_sq < 0.95 * full) ++expect;
  EXPECT_EQ(*c.selected, expect);
}

TEST(Sweep, RejectsBadGrid) {
  const auto t = two_cell();
  InteractionDesign d(CovariateSchema::from_levels({2}), 1);
  EXPECT_THROW(sweep_tradeoff(d, t, {}, 2), std::invalid_argument);
  EXPECT_THROW(sweep_tradeoff(d, t, {1.0, -1.0}, 2), std::invalid_argument);
}
