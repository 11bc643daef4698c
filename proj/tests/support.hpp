#pragma once

// Shared fixtures and independent oracles for the test programs.

#include <random>
#include <vector>

#include "mlcal/design.hpp"
#include "mlcal/solver.hpp"

namespace mltest {

using mlcal::CellTable;
using mlcal::CovariateSchema;

/// Random table: population counts in [1, max_pop], respondent counts
/// drawn as a fraction of each cell, with roughly `empty_frac` of cells
/// left without respondents. Every margin keeps at least one respondent cell.
inline CellTable random_table(const CovariateSchema& schema, std::mt19937_64& rng, double empty_frac = 0.2,
                              int max_pop = 60, bool outcomes = false) {
  const std::size_t J = schema.num_cells();
  CellTable t{schema, std::vector<double>(J), std::vector<double>(J), std::nullopt, std::nullopt};
  std::uniform_int_distribution<int> pop(1, max_pop);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    for (std::size_t s = 0; s < J; ++s) {
      t.pop_counts[s] = pop(rng);
      if (u(rng) < empty_frac) {
        t.resp_counts[s] = 0;
      } else {
        const double frac = 0.05 + 0.6 * u(rng);
        t.resp_counts[s] = std::max(1.0, std::floor(frac * t.pop_counts[s]));
      }
    }
    bool ok = true;
    for (std::size_t c = 0; c < schema.num_covariates() && ok; ++c)
      for (std::size_t l = 0; l < schema.levels()[c] && ok; ++l) {
        double r = 0;
        for (std::size_t s = 0; s < J; ++s)
          if (mlcal::cell_level(schema, s, c) == l) r += t.resp_counts[s];
        ok = r > 0;
      }
    if (ok) break;
  }
  if (outcomes) {
    t.resp_sums.emplace(J, 0.0);
    t.resp_sumsq.emplace(J, 0.0);
    std::normal_distribution<double> z(0.0, 1.0);
    for (std::size_t s = 0; s < J; ++s) {
      const double mu = z(rng);
      for (int i = 0; i < static_cast<int>(t.resp_counts[s]); ++i) {
        const double y = mu + 0.5 * z(rng);
        (*t.resp_sums)[s] += y;
        (*t.resp_sumsq)[s] += y * y;
      }
    }
  }
  return t;
}

/// Additive iterative proportional fitting for the squared-weight raking
/// problem. Cycles through covariates; for each level finds the shift delta
/// with sum n * clip(z + delta, lo, hi) equal to the population margin.
/// Works on cell-level scores only, never on the design matrix.
inline std::vector<double> ipf_raking(const CellTable& t, double lo = 0.0, double hi = mlcal::kInf,
                                      double tol = 1e-13, int max_sweeps = 200000, double* residual = nullptr) {
  const auto& schema = t.schema;
  const std::size_t J = t.num_cells();
  const double N = t.population_size();
  std::vector<double> z(J, N / t.respondent_size());
  auto gamma = [&](std::size_t s) { return mlcal::clip(z[s], lo, hi); };
  double checkpoint = mlcal::kInf;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double worst = 0.0;
    for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
      for (std::size_t l = 0; l < schema.levels()[c]; ++l) {
        std::vector<std::size_t> cells;
        double target = 0.0;
        for (std::size_t s = 0; s < J; ++s)
          if (mlcal::cell_level(schema, s, c) == l) {
            cells.push_back(s);
            target += t.pop_counts[s];
          }
        auto f = [&](double delta) {
          double v = 0.0;
          for (auto s : cells) v += t.resp_counts[s] * mlcal::clip(z[s] + delta, lo, hi);
          return v - target;
        };
        worst = std::max(worst, std::abs(f(0.0)));
        // f is flat outside [lo - max z, hi - min z]
        double zmin = mlcal::kInf, zmax = -mlcal::kInf;
        for (auto s : cells)
          if (t.resp_counts[s] > 0) zmin = std::min(zmin, z[s]), zmax = std::max(zmax, z[s]);
        double a = std::isfinite(lo) ? lo - zmax - 1.0 : -1.0;
        double b = std::isfinite(hi) ? hi - zmin + 1.0 : 1.0;
        while (!std::isfinite(lo) && f(a) > 0) a = 2 * a - 1;
        while (!std::isfinite(hi) && f(b) < 0) b = 2 * b + 1;
        if (zmin > zmax || f(a) > 0 || f(b) < 0) {  // margin unreachable inside the box
          if (residual) *residual = mlcal::kInf;
          return std::vector<double>(J, 0.0);
        }
        for (int it = 0; it < 200 && b - a > 0; ++it) {
          const double m = 0.5 * (a + b);
          if (m == a || m == b) break;
          (f(m) < 0 ? a : b) = m;
        }
        const double delta = std::abs(f(a)) < std::abs(f(b)) ? a : b;
        for (auto s : cells) z[s] += delta;
      }
    }
    if (residual) *residual = worst / N;
    if (worst <= tol * N) break;
    if (sweep % 1000 == 999) {  // stalled: treat as infeasible
      if (worst > 0.5 * checkpoint) break;
      checkpoint = worst;
    }
  }
  std::vector<double> g(J, 0.0);
  for (std::size_t s = 0; s < J; ++s)
    if (t.resp_counts[s] > 0) g[s] = gamma(s);
  return g;
}

/// random_table restricted to instances whose raking problem is feasible,
/// as certified by the IPF oracle reaching its tolerance.
inline CellTable random_feasible_table(const CovariateSchema& schema, std::mt19937_64& rng, double empty_frac = 0.2,
                                       int max_pop = 60, bool outcomes = false, double lo = 0.0,
                                       double hi = mlcal::kInf) {
  for (;;) {
    auto t = random_table(schema, rng, empty_frac, max_pop, outcomes);
    double res = 1.0;
    ipf_raking(t, lo, hi, 1e-12, 20000, &res);
    if (res <= 1e-12) return t;
  }
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mltest
