#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "mlcal/io.hpp"

using namespace mlcal;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kError = 1, kNotConverged = 2, kInfeasible = 3 };

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(parse_number(item));
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("invalid ") + what + " value '" + item + "'");
    }
  }
  if (out.empty()) throw std::invalid_argument(std::string("empty ") + what);
  return out;
}

struct Common {
  std::string schema, data, pop_counts, out;
  std::size_t order = 1;
  std::string lambda, bounds = "0,inf";
  std::uint64_t seed = 1;
  int max_iterations = 5000;

  void add(CLI::App* app, bool need_order = true) {
    app->add_option("--schema", schema, "schema JSON")->required()->check(CLI::ExistingFile);
    app->add_option("--data", data, "microdata CSV")->required()->check(CLI::ExistingFile);
    app->add_option("--pop-counts", pop_counts, "population counts CSV")->check(CLI::ExistingFile);
    if (need_order) {
      app->add_option("--order", order, "highest interaction order")->check(CLI::PositiveNumber);
      app->add_option("--lambda", lambda, "lambda: scalar, per-order list, or inf");
    }
    app->add_option("--bounds", bounds, "weight bounds L,U");
    app->add_option("--max-iterations", max_iterations, "dual solver iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed, "random seed");
    app->add_option("--out", out, "output directory")->required();
  }

  Bounds parse_bounds() const {
    const auto b = parse_list(bounds, "bounds");
    if (b.size() != 2) throw std::invalid_argument("--bounds expects L,U");
    return {b[0], b[1]};
  }

  CalibrationSpec spec() const {
    CalibrationSpec s;
    s.max_order = order;
    s.bounds = parse_bounds();
    s.max_iterations = max_iterations;
    if (order > 1) {
      if (lambda.empty()) throw std::invalid_argument("--lambda is required when --order > 1");
      auto l = parse_list(lambda, "lambda");
      if (l.size() == 1) l.assign(order - 1, l[0]);
      if (l.size() != order - 1)
        throw std::invalid_argument("--lambda needs 1 or " + std::to_string(order - 1) + " values");
      s.lambda = l;
    } else if (!lambda.empty()) {
      throw std::invalid_argument("--lambda requires --order >= 2");
    }
    return s;
  }

  CovariateSchema load_schema() const { return io::read_schema(schema); }

  CellTable load_table(const CovariateSchema& sc) const {
    return pop_counts.empty() ? io::read_microdata(data, sc) : io::read_sample_with_counts(data, pop_counts, sc);
  }

  fs::path out_dir() const {
    fs::create_directories(out);
    return fs::path(out);
  }
};

void emit(const fs::path& p, const std::string& text) {
  io::write_text(p.string(), text);
  std::cout << "wrote " << p.filename().string() << "\n";
}

int status_code(SolveStatus s) {
  switch (s) {
    case SolveStatus::converged: return kOk;
    case SolveStatus::not_converged: return kNotConverged;
    case SolveStatus::infeasible: return kInfeasible;
  }
  return kError;
}

// ---------------------------------------------------------------- weights

int cmd_weights(const Common& c) {
  const auto schema = c.load_schema();
  const auto spec = c.spec();
  const auto table = c.load_table(schema);
  InteractionDesign design(schema, spec.max_order);
  const auto sol = calibrate(design, table, spec);
  const auto dir = c.out_dir();
  emit(dir / "weights.csv", io::weights_csv(table, sol.gamma));
  emit(dir / "diagnostics.json", io::dump(io::diagnostics_json(sol, design, table, spec)));
  if (sol.status != SolveStatus::converged) std::cerr << "mlcal: " << to_string(sol.status) << ": " << sol.message << "\n";
  return status_code(sol.status);
}

// ---------------------------------------------------------------- estimate

struct ModelOptions {
  std::string kind = "ridge";
  std::size_t order = 0;
  std::string penalty = "cv";
  std::size_t trees = 50, depth = 4;
  std::optional<double> constant;
};

OutcomeModel fit_model(const ModelOptions& m, const InteractionDesign& design, const CellTable& table,
                       std::uint64_t seed) {
  if (m.kind == "constant") return constant_model(table, m.constant);
  if (m.kind == "trees") return fit_bagged_trees(table, TreeOptions{m.trees, m.depth, seed, 1.0, true});
  const std::size_t order = m.order;
  if (m.kind == "ridge") {
    if (m.penalty == "cv") return fit_ridge_cv(design, table, order, {}, 5, seed);
    return fit_ridge(design, table, order, parse_number(m.penalty));
  }
  if (m.kind == "map") {
    if (m.penalty == "cv") throw std::invalid_argument("--outcome-model map needs a numeric --penalty");
    return fit_map_linear(design, table, PriorCovariance::ridge(order, parse_number(m.penalty)));
  }
  throw std::invalid_argument("unknown outcome model '" + m.kind + "'");
}

int cmd_estimate(const Common& c, const ModelOptions& mo_in, const std::string& methods_text,
                 const std::string& weights_source, double alpha) {
  const auto schema = c.load_schema();
  const auto table = c.load_table(schema);
  if (!table.has_outcomes()) throw io::IoError(c.data, 0, "no 'outcome' values for respondents");
  std::vector<std::string> methods;
  {
    std::istringstream in(methods_text);
    std::string m;
    while (std::getline(in, m, ','))
      if (m == "weighted" || m == "poststrat" || m == "mrp" || m == "drp")
        methods.push_back(m);
      else
        throw std::invalid_argument("unknown method '" + m + "' (weighted, poststrat, mrp, drp)");
  }
  if (weights_source != "calibrate" && weights_source != "poststrat")
    throw std::invalid_argument("--weights must be calibrate or poststrat");
  auto mo = mo_in;
  if (mo.order == 0) mo.order = std::min<std::size_t>(3, schema.num_covariates());
  if (mo.order > schema.num_covariates()) throw std::invalid_argument("--model-order exceeds the number of covariates");
  const auto spec = c.spec();
  InteractionDesign design(schema, std::max(spec.max_order, mo.order));

  auto needs = [&](const char* m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  const bool need_weights = needs("weighted") || needs("drp");
  const bool need_model = needs("mrp") || needs("drp");

  io::Json weights_info = nullptr;
  int code = kOk;
  std::optional<WeightSolution> w;
  if (need_weights) {
    if (weights_source == "poststrat") {
      w = poststrat_weights(table);
      weights_info = {{"source", "poststrat"}, {"status", to_string(w->status)}};
    } else {
      w = calibrate(design, table, spec);
      weights_info = {{"source", "calibrate"},
                      {"spec", io::spec_to_json(spec)},
                      {"status", to_string(w->status)},
                      {"message", w->message}};
      code = status_code(w->status);
      if (code == kInfeasible) {
        std::cerr << "mlcal: infeasible: " << w->message << "\n";
        return code;
      }
    }
  }
  std::optional<OutcomeModel> model;
  if (need_model) model = fit_model(mo, design, table, c.seed);

  io::Json est = io::Json::array();
  for (const auto& m : methods) {
    if (m == "weighted")
      est.push_back(io::estimate_to_json(weighted_mean(*w, table, weights_source == "poststrat" ? "poststrat" : "weighted", alpha)));
    else if (m == "poststrat")
      est.push_back(io::estimate_to_json(weighted_mean(poststrat_weights(table), table, "poststrat", alpha)));
    else if (m == "mrp")
      est.push_back(io::estimate_to_json(mrp_estimate(*model, table)));
    else
      est.push_back(io::estimate_to_json(drp_estimate(*model, w->gamma, table, alpha)));
  }
  io::Json out = {{"weights", weights_info}, {"estimates", est}};
  if (model) out["outcome_model"] = {{"kind", to_string(model->kind)}, {"file", "model.json"}};
  const auto dir = c.out_dir();
  emit(dir / "estimates.json", io::dump(out));
  if (model) {
    emit(dir / "model.json", io::dump(io::model_to_json(*model, model->coefficients.empty() ? nullptr : &design)));
    emit(dir / "predictions.csv", io::predictions_csv(*model));
  }
  if (code != kOk) std::cerr << "mlcal: weights " << to_string(w->status) << ": " << w->message << "\n";
  return code;
}

// ---------------------------------------------------------------- sweep

int cmd_sweep(const Common& c, const std::string& grid_text, double fraction) {
  const auto schema = c.load_schema();
  const auto table = c.load_table(schema);
  if (c.order < 2) throw std::invalid_argument("sweep needs --order >= 2");
  if (!c.lambda.empty()) throw std::invalid_argument("sweep takes --grid, not --lambda");
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("--fraction must lie in (0, 1]");
  InteractionDesign design(schema, c.order);
  const auto grid = grid_text == "default" ? default_lambda_grid(schema.num_cells()) : parse_list(grid_text, "grid");
  check_margin_feasibility(table, c.parse_bounds());
  const auto curve = sweep_tradeoff(design, table, grid, c.order, c.parse_bounds(), fraction);
  const auto dir = c.out_dir();
  emit(dir / "tradeoff.csv", io::tradeoff_csv(curve));
  emit(dir / "sweep.json", io::dump(io::sweep_to_json(curve)));
  for (const auto& p : curve.points)
    if (!p.converged) {
      std::cerr << "mlcal: lambda " << format_number(p.lambda) << " not converged: " << p.message << "\n";
      return kNotConverged;
    }
  return kOk;
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const std::string& config_path, std::optional<std::size_t> reps, std::optional<std::uint64_t> seed,
                 unsigned threads, const std::string& out) {
  io::SimulationConfig cfg;
  if (!config_path.empty())
    cfg = io::simulation_config_from_json(io::parse_json(io::read_text(config_path), config_path), config_path);
  if (reps) {
    if (*reps < 1) throw std::invalid_argument("--reps must be at least 1");
    cfg.reps = *reps;
  }
  if (seed) cfg.seed = *seed;
  const auto schema = cfg.make_schema();
  const std::size_t order = cfg.order_for(schema);
  InteractionDesign design(schema, order);
  Scenario sc = cfg.dgp == "fourth_order" ? fourth_order_scenario(design, cfg.fourth_order)
                                          : coverage_scenario(design, cfg.coverage);
  if (cfg.census) std::fill(sc.pi.begin(), sc.pi.end(), 1.0);
  auto suite = cfg.suite;
  if (suite.ridge_order > order || suite.multilevel_order > order)
    throw std::invalid_argument("suite orders exceed design_order " + std::to_string(order));
  if (suite.ridge && cfg.ridge_cv)
    suite.ridge_penalty = pilot_ridge_penalty(sc.population, sc.pi, design, suite.ridge_order,
                                              mix_seed(cfg.seed, 0xC5), suite.resample)
                              .selected;
  const auto res = run_replications(sc.population, sc.pi, design, suite, cfg.reps, cfg.seed, threads);
  fs::create_directories(out);
  const fs::path dir(out);
  emit(dir / "results.csv", io::results_csv(res));
  emit(dir / "simulation.json", io::dump(io::simulation_summary_json(res, cfg, suite.ridge_penalty)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multilevel calibration weighting"};
  app.require_subcommand(1);

  Common wc, ec, sc;
  auto* weights = app.add_subcommand("weights", "solve for calibration weights");
  wc.add(weights);

  auto* estimate = app.add_subcommand("estimate", "weighted, MRP and DRP estimates");
  ec.add(estimate);
  ModelOptions mo;
  std::string methods = "weighted,mrp,drp", wsource = "calibrate";
  double alpha = 0.05;
  estimate->add_option("--method", methods, "comma list of weighted, poststrat, mrp, drp");
  estimate->add_option("--weights", wsource, "calibrate or poststrat");
  estimate->add_option("--outcome-model", mo.kind, "ridge, map, trees or constant")
      ->check(CLI::IsMember({"ridge", "map", "trees", "constant"}));
  estimate->add_option("--model-order", mo.order, "interaction order of linear outcome models");
  estimate->add_option("--penalty", mo.penalty, "ridge penalty or 'cv'");
  estimate->add_option("--trees", mo.trees, "number of bagged trees")->check(CLI::PositiveNumber);
  estimate->add_option("--depth", mo.depth, "tree depth");
  estimate->add_option("--constant", mo.constant, "value of the constant model");
  estimate->add_option("--alpha", alpha, "interval level")->check(CLI::Range(1e-12, 0.999999));

  auto* sweep = app.add_subcommand("sweep", "lambda trade-off curve");
  sc.add(sweep);
  sc.order = 2;
  std::string grid = "default";
  double fraction = 0.95;
  sweep->add_option("--grid", grid, "comma list of lambda values or 'default'");
  sweep->add_option("--fraction", fraction, "imbalance reduction fraction for selection");

  auto* simulate = app.add_subcommand("simulate", "simulation study");
  std::string config, sim_out;
  std::optional<std::size_t> reps;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  simulate->add_option("--config", config, "simulation config JSON")->check(CLI::ExistingFile);
  simulate->add_option("--reps", reps, "replications");
  simulate->add_option("--seed", seed, "master seed");
  simulate->add_option("--threads", threads, "worker threads (0 = hardware)");
  simulate->add_option("--out", sim_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kError;
  }

  try {
    if (*weights) return cmd_weights(wc);
    if (*estimate) return cmd_estimate(ec, mo, methods, wsource, alpha);
    if (*sweep) return cmd_sweep(sc, grid, fraction);
    if (*simulate) return cmd_simulate(config, reps, seed, threads, sim_out);
  } catch (const InfeasibleError& e) {
    std::cerr << "mlcal: infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "mlcal: error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}
