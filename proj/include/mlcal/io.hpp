#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlcal/estimators.hpp"
#include "mlcal/outcomes.hpp"
#include "mlcal/simlab.hpp"
#include "mlcal/solver.hpp"

namespace mlcal::io {

using Json = nlohmann::ordered_json;

/// Input error carrying the file and (1-based, 0 = whole file) line.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        file_(file),
        line_(line) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

// ---------------------------------------------------------------- text helpers

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, 0, "cannot write file");
  out << text;
  if (!out) throw IoError(path, 0, "write failed");
}

struct CsvTable {
  std::string file;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // source line of each row

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_csv_line(const std::string& line, const std::string& file, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, closed = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c != '"') {
        cur += c;
      } else if (i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else {
        quoted = false;
        closed = true;
      }
    } else if (c == ',') {
      out.push_back(closed ? cur : trim(cur));
      cur.clear();
      closed = false;
    } else if (closed) {
      if (c != ' ' && c != '\t') throw IoError(file, lineno, "text after closing quote");
    } else if (c == '"' && trim(cur).empty()) {
      cur.clear();
      quoted = true;
    } else {
      cur += c;
    }
  }
  if (quoted) throw IoError(file, lineno, "unterminated quote");
  out.push_back(closed ? cur : trim(cur));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace detail

inline CsvTable parse_csv(const std::string& text, const std::string& file) {
  CsvTable t;
  t.file = file;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line, file, lineno);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      for (std::size_t i = 0; i < t.header.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
          if (t.header[i] == t.header[j]) throw IoError(file, lineno, "duplicate column '" + t.header[i] + "'");
      continue;
    }
    if (fields.size() != t.header.size())
      throw IoError(file, lineno,
                    "expected " + std::to_string(t.header.size()) + " fields, got " + std::to_string(fields.size()));
    t.rows.push_back(std::move(fields));
    t.lines.push_back(lineno);
  }
  if (!have_header) throw IoError(file, 0, "empty CSV file");
  return t;
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_text(path), path); }

/// JSON number, or a string for non-finite values.
inline Json num(double v) {
  if (std::isfinite(v)) return v;
  return format_number(v);
}

// ---------------------------------------------------------------- schema

/// {"covariates": [{"name": "sex", "levels": ["m", "f"]}, ...]}
inline CovariateSchema schema_from_json(const Json& j, const std::string& file = "<schema>") {
  if (!j.is_object() || !j.contains("covariates") || !j["covariates"].is_array())
    throw IoError(file, 0, "schema needs a 'covariates' array");
  std::vector<Covariate> covs;
  for (const auto& c : j["covariates"]) {
    if (!c.is_object() || !c.contains("name") || !c["name"].is_string() || !c.contains("levels") ||
        !c["levels"].is_array())
      throw IoError(file, 0, "each covariate needs 'name' and 'levels'");
    Covariate cov;
    cov.name = c["name"].get<std::string>();
    for (const auto& l : c["levels"]) {
      if (!l.is_string()) throw IoError(file, 0, "level labels must be strings (covariate '" + cov.name + "')");
      cov.labels.push_back(l.get<std::string>());
    }
    covs.push_back(std::move(cov));
  }
  try {
    return CovariateSchema(std::move(covs));
  } catch (const std::exception& e) {
    throw IoError(file, 0, e.what());
  }
}

inline Json schema_to_json(const CovariateSchema& schema) {
  Json covs = Json::array();
  for (std::size_t c = 0; c < schema.num_covariates(); ++c)
    covs.push_back({{"name", schema.covariate(c).name}, {"levels", schema.covariate(c).labels}});
  return {{"covariates", covs}};
}

inline Json parse_json(const std::string& text, const std::string& file) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw IoError(file, 0, std::string("invalid JSON: ") + e.what());
  }
}

inline CovariateSchema read_schema(const std::string& path) { return schema_from_json(parse_json(read_text(path), path), path); }

// ---------------------------------------------------------------- cell tables

namespace detail {

inline std::vector<std::size_t> covariate_columns(const CsvTable& t, const CovariateSchema& schema) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) {
    auto i = t.column(schema.covariate(c).name);
    if (!i) throw IoError(t.file, 0, "missing covariate column '" + schema.covariate(c).name + "'");
    cols.push_back(*i);
  }
  return cols;
}

inline std::vector<std::size_t> row_levels(const CsvTable& t, std::size_t r, const CovariateSchema& schema,
                                           const std::vector<std::size_t>& cols) {
  std::vector<std::size_t> levels(cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    try {
      levels[c] = schema.level_index(c, t.rows[r][cols[c]]);
    } catch (const SchemaError& e) {
      throw IoError(t.file, t.lines[r], e.what());
    }
  }
  return levels;
}

inline double row_number(const CsvTable& t, std::size_t r, std::size_t col, const char* what) {
  try {
    return parse_number(t.rows[r][col]);
  } catch (const std::exception&) {
    throw IoError(t.file, t.lines[r], std::string("invalid ") + what + " '" + t.rows[r][col] + "'");
  }
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "."; }

}  // namespace detail

/// Unit records: covariate columns, `respondent` in {0,1} (all rows are
/// respondents when the column is absent), optional numeric `outcome`.
inline std::vector<MicroRow> microdata_rows(const CsvTable& t, const CovariateSchema& schema) {
  const auto cols = detail::covariate_columns(t, schema);
  const auto rcol = t.column("respondent");
  const auto ycol = t.column("outcome");
  std::vector<MicroRow> rows;
  rows.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    MicroRow m;
    m.levels = detail::row_levels(t, r, schema, cols);
    if (rcol) {
      const auto& v = t.rows[r][*rcol];
      if (v == "1")
        m.respondent = true;
      else if (v == "0")
        m.respondent = false;
      else
        throw IoError(t.file, t.lines[r], "respondent must be 0 or 1, got '" + v + "'");
    } else {
      m.respondent = true;
    }
    if (ycol && !detail::is_missing(t.rows[r][*ycol])) {
      const double y = detail::row_number(t, r, *ycol, "outcome");
      if (!std::isfinite(y)) throw IoError(t.file, t.lines[r], "non-finite outcome");
      if (m.respondent) m.outcome = y;
    }
    rows.push_back(std::move(m));
  }
  return rows;
}

namespace detail {

inline CellTable tabulate_csv(const CsvTable& t, const CovariateSchema& schema, std::span<const MicroRow> rows) {
  try {
    return tabulate(schema, rows);
  } catch (const IngestError& e) {
    const std::size_t line = e.row() > 0 && e.row() <= t.lines.size() ? t.lines[e.row() - 1] : 0;
    std::string msg = e.what();
    if (const auto p = msg.rfind(" (row "); p != std::string::npos) msg.erase(p);
    throw IoError(t.file, line, msg);
  }
}

}  // namespace detail

inline CellTable read_microdata(const std::string& path, const CovariateSchema& schema) {
  const auto t = read_csv(path);
  const auto rows = microdata_rows(t, schema);
  if (rows.empty()) throw IoError(path, 0, "no data rows");
  return detail::tabulate_csv(t, schema, rows);
}

/// Population counts: covariate columns plus `count`. Repeated cells add up.
inline std::vector<double> read_pop_counts(const std::string& path, const CovariateSchema& schema) {
  const auto t = read_csv(path);
  const auto cols = detail::covariate_columns(t, schema);
  const auto ccol = t.column("count");
  if (!ccol) throw IoError(path, 0, "missing column 'count'");
  std::vector<double> counts(schema.num_cells(), 0.0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto levels = detail::row_levels(t, r, schema, cols);
    const double c = detail::row_number(t, r, *ccol, "count");
    if (!(c >= 0) || !std::isfinite(c)) throw IoError(path, t.lines[r], "count must be finite and nonnegative");
    counts[encode_cell(schema, levels).index] += c;
  }
  double total = 0;
  for (double c : counts) total += c;
  if (!(total > 0)) throw IoError(path, 0, "population counts sum to zero");
  return counts;
}

/// Respondent sample from microdata (non-respondent rows are ignored) with
/// population counts from a separate file.
inline CellTable read_sample_with_counts(const std::string& data_path, const std::string& counts_path,
                                         const CovariateSchema& schema) {
  const auto t = read_csv(data_path);
  auto rows = microdata_rows(t, schema);
  std::vector<MicroRow> resp;
  CsvTable kept = t;
  kept.rows.clear();
  kept.lines.clear();
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].respondent) {
      resp.push_back(rows[i]);
      kept.rows.push_back(t.rows[i]);
      kept.lines.push_back(t.lines[i]);
    }
  if (resp.empty()) throw IoError(data_path, 0, "no respondent rows");
  auto table = detail::tabulate_csv(kept, schema, resp);
  table.pop_counts = read_pop_counts(counts_path, schema);
  try {
    table.validate();
  } catch (const std::exception& e) {
    throw IoError(counts_path, 0, e.what());
  }
  return table;
}

// ---------------------------------------------------------------- weights

inline std::string weights_csv(const CellTable& table, std::span<const double> gamma) {
  const auto& schema = table.schema;
  const double N = table.population_size();
  std::string out = "cell";
  for (std::size_t c = 0; c < schema.num_covariates(); ++c) out += "," + detail::csv_field(schema.covariate(c).name);
  out += ",n,N,gamma,weight\n";
  for (std::size_t s = 0; s < table.num_cells(); ++s) {
    const double n = table.resp_counts[s];
    const double g = n > 0 ? gamma[s] : 0.0;
    out += std::to_string(s);
    const auto id = decode_cell(schema, s);
    for (std::size_t c = 0; c < schema.num_covariates(); ++c)
      out += "," + detail::csv_field(schema.covariate(c).labels[id.levels[c]]);
    out += "," + format_number(n) + "," + format_number(table.pop_counts[s]) + "," + format_number(g) + "," +
           format_number(n * g / N) + "\n";
  }
  return out;
}

inline Json spec_to_json(const CalibrationSpec& spec) {
  Json lam = Json::array();
  for (double l : spec.lambda) lam.push_back(num(l));
  return {{"max_order", spec.max_order},
          {"lambda", lam},
          {"bounds", {num(spec.bounds.lower), num(spec.bounds.upper)}},
          {"balance_tol", spec.balance_tol},
          {"grad_tol", spec.grad_tol},
          {"max_iterations", spec.max_iterations}};
}

inline Json diagnostics_json(const WeightSolution& sol, const InteractionDesign& design, const CellTable& table,
                             const CalibrationSpec& spec) {
  const auto kkt = kkt_report(sol, design, table, spec);
  Json imb = Json::array();
  for (std::size_t k = 0; k < sol.imbalance_by_order.size(); ++k)
    imb.push_back({{"order", k + 1}, {"imbalance", num(sol.imbalance_by_order[k])}});
  Json stat = Json::array();
  for (const auto& o : kkt.orders)
    stat.push_back({{"order", o.order},
                    {"scaled_imbalance", num(o.scaled_imbalance)},
                    {"lambda_beta", num(o.lambda_beta)},
                    {"difference", num(o.difference)}});
  return {{"status", to_string(sol.status)},
          {"message", sol.message},
          {"spec", spec_to_json(spec)},
          {"cells", table.num_cells()},
          {"population_size", num(table.population_size())},
          {"respondents", num(table.respondent_size())},
          {"iterations", sol.dual.iterations},
          {"newton_iterations", sol.dual.newton_iterations},
          {"grad_norm", num(sol.dual.grad_norm)},
          {"balance_residual", num(sol.balance_residual)},
          {"primal_objective", num(kkt.primal_objective)},
          {"dual_objective", num(kkt.dual_objective)},
          {"duality_gap", num(kkt.duality_gap)},
          {"max_stationarity_gap", num(kkt.max_stationarity_gap)},
          {"imbalance_by_order", imb},
          {"stationarity", stat},
          {"weight_total", num(sol.weight_total)},
          {"sum_sq_weights", num(sol.sum_sq_weights)},
          {"n_eff", num(sol.n_eff)},
          {"num_at_lower", sol.num_at_lower},
          {"num_at_upper", sol.num_at_upper}};
}

// ---------------------------------------------------------------- estimates and models

inline Json estimate_to_json(const EstimateReport& r) {
  return {{"method", r.method},
          {"estimate", num(r.estimate)},
          {"variance", num(r.variance)},
          {"ci", {num(r.ci_lower), num(r.ci_upper)}},
          {"alpha", num(r.alpha)},
          {"n_eff", num(r.n_eff)},
          {"design_effect", num(r.design_effect)},
          {"bias_correction", num(r.bias_correction)}};
}

inline Json model_to_json(const OutcomeModel& m, const InteractionDesign* design = nullptr) {
  Json j = {{"kind", to_string(m.kind)}, {"order", m.order}, {"penalty", num(m.penalty)}};
  if (!m.prior.q.empty()) {
    Json q = Json::array();
    for (double v : m.prior.q) q.push_back(num(v));
    j["prior_q"] = q;
  }
  if (!m.coefficients.empty()) {
    Json coef = Json::array();
    for (std::size_t i = 0; i < m.coefficients.size(); ++i) {
      Json c = {{"column", i}, {"value", num(m.coefficients[i])}};
      if (design && i < design->num_columns()) c["label"] = design->column_label(i);
      coef.push_back(c);
    }
    j["coefficients"] = coef;
  }
  if (!m.trees.empty()) {
    j["num_trees"] = m.num_trees;
    j["depth"] = m.depth;
    j["seed"] = m.seed;
    Json trees = Json::array();
    for (const auto& t : m.trees) {
      Json nodes = Json::array();
      for (const auto& n : t.nodes) {
        if (n.covariate >= 0)
          nodes.push_back({{"covariate", n.covariate}, {"level", n.level}, {"left", n.left}, {"right", n.right}});
        else
          nodes.push_back({{"value", num(n.value)}, {"weight", num(n.weight)}});
      }
      trees.push_back(nodes);
    }
    j["trees"] = trees;
  }
  if (m.cv) {
    Json grid = Json::array(), loss = Json::array();
    for (double g : m.cv->grid) grid.push_back(num(g));
    for (double l : m.cv->loss) loss.push_back(num(l));
    j["cross_validation"] = {
        {"seed", m.cv->seed}, {"folds", m.cv->folds}, {"grid", grid}, {"loss", loss}, {"selected", num(m.cv->selected)}};
  }
  return j;
}

inline std::string predictions_csv(const OutcomeModel& m) {
  std::string out = "cell,mu_hat\n";
  for (std::size_t s = 0; s < m.predictions.size(); ++s)
    out += std::to_string(s) + "," + format_number(m.predictions[s]) + "\n";
  return out;
}

// ---------------------------------------------------------------- sweep

inline std::string tradeoff_csv(const TradeoffCurve& c) {
  std::string out = "key,lambda,imbalance_sq,n_eff,sum_sq_weights,converged,selected\n";
  out += "raking,inf," + format_number(c.raking_imbalance_sq) + "," + format_number(c.raking_n_eff) + ",,1,0\n";
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    const auto& p = c.points[i];
    out += "grid," + format_number(p.lambda) + "," + format_number(p.imbalance_sq) + "," + format_number(p.n_eff) +
           "," + format_number(p.sum_sq_weights) + "," + (p.converged ? "1" : "0") + "," +
           (c.selected && *c.selected == i ? "1" : "0") + "\n";
  }
  return out;
}

inline Json sweep_to_json(const TradeoffCurve& c) {
  Json failed = Json::array();
  for (const auto& p : c.points)
    if (!p.converged) failed.push_back({{"lambda", num(p.lambda)}, {"message", p.message}});
  Json j = {{"rule", c.rule},
            {"reduction_fraction", num(c.reduction_fraction)},
            {"raking_imbalance_sq", num(c.raking_imbalance_sq)},
            {"raking_n_eff", num(c.raking_n_eff)},
            {"floor_imbalance_sq", num(c.floor_imbalance_sq)},
            {"points", c.points.size()},
            {"imbalance_monotone", c.imbalance_monotone},
            {"weights_monotone", c.weights_monotone},
            {"n_eff_monotone", c.n_eff_monotone},
            {"failed_points", failed}};
  if (c.selected) {
    const auto& p = c.points[*c.selected];
    j["selected"] = {{"index", *c.selected}, {"lambda", num(p.lambda)}, {"imbalance_sq", num(p.imbalance_sq)},
                     {"n_eff", num(p.n_eff)}};
  } else {
    j["selected"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------- simulation

struct SimulationConfig {
  std::string schema_preset = "small";  // small | election | custom
  std::optional<CovariateSchema> schema;
  std::string dgp = "coverage";  // coverage | fourth_order
  FourthOrderConfig fourth_order;
  CoverageConfig coverage;
  bool census = false;
  std::size_t design_order = 0;  // 0: min(4, d)
  SuiteConfig suite;
  bool ridge_cv = false;
  std::size_t reps = 100;
  std::uint64_t seed = 1;

  CovariateSchema make_schema() const {
    if (schema) return *schema;
    if (schema_preset == "election") return election_preset_schema();
    return small_preset_schema();
  }
  std::size_t order_for(const CovariateSchema& s) const {
    return design_order ? design_order : std::min<std::size_t>(4, s.num_covariates());
  }
};

namespace detail {

template <class T>
void take(const Json& j, const char* key, T& out, const std::string& file) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const std::exception&) {
    throw IoError(file, 0, std::string("bad value for '") + key + "'");
  }
}

inline double json_real(const Json& v, const std::string& file, const char* key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) try {
      return parse_number(v.get<std::string>());
    } catch (const std::exception&) {
    }
  throw IoError(file, 0, std::string("bad number for '") + key + "'");
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& file,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw IoError(file, 0, "unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline SimulationConfig simulation_config_from_json(const Json& j, const std::string& file = "<config>") {
  using detail::take;
  if (!j.is_object()) throw IoError(file, 0, "simulation config must be a JSON object");
  detail::check_keys(j, {"schema", "dgp", "design_order", "suite", "reps", "seed"}, file, "config");
  SimulationConfig c;
  if (j.contains("schema")) {
    const auto& s = j["schema"];
    if (s.is_string()) {
      c.schema_preset = s.get<std::string>();
      if (c.schema_preset != "small" && c.schema_preset != "election")
        throw IoError(file, 0, "schema preset must be 'small' or 'election'");
    } else {
      c.schema_preset = "custom";
      c.schema = schema_from_json(s, file);
    }
  }
  if (j.contains("dgp")) {
    const auto& d = j["dgp"];
    if (!d.is_object()) throw IoError(file, 0, "'dgp' must be an object");
    detail::check_keys(d,
                       {"kind", "population_size", "response_scale", "response_rate", "outcome_scale", "correlation",
                        "tau", "noise_sd", "seed", "census"},
                       file, "dgp");
    take(d, "kind", c.dgp, file);
    if (c.dgp != "coverage" && c.dgp != "fourth_order")
      throw IoError(file, 0, "dgp kind must be 'coverage' or 'fourth_order'");
    take(d, "census", c.census, file);
    auto& f = c.fourth_order;
    auto& v = c.coverage;
    if (c.dgp == "fourth_order") {
      take(d, "population_size", f.population_size, file);
      take(d, "response_scale", f.response_scale, file);
      take(d, "response_rate", f.response_rate, file);
      take(d, "outcome_scale", f.outcome_scale, file);
      take(d, "correlation", f.correlation, file);
      take(d, "tau", f.tau, file);
      take(d, "seed", f.seed, file);
      if (d.contains("noise_sd")) throw IoError(file, 0, "'noise_sd' applies to the coverage dgp only");
    } else {
      take(d, "population_size", v.population_size, file);
      take(d, "response_scale", v.response_scale, file);
      take(d, "response_rate", v.response_rate, file);
      take(d, "noise_sd", v.noise_sd, file);
      take(d, "seed", v.seed, file);
      for (const char* k : {"outcome_scale", "correlation", "tau"})
        if (d.contains(k)) throw IoError(file, 0, std::string("'") + k + "' applies to the fourth_order dgp only");
    }
  }
  take(j, "design_order", c.design_order, file);
  take(j, "reps", c.reps, file);
  take(j, "seed", c.seed, file);
  if (j.contains("suite")) {
    const auto& s = j["suite"];
    if (!s.is_object()) throw IoError(file, 0, "'suite' must be an object");
    detail::check_keys(s,
                       {"raking", "multilevel", "multilevel_order", "multilevel_lambda", "poststrat", "ridge",
                        "ridge_order", "ridge_penalty", "trees", "num_trees", "tree_depth", "bounds", "alpha",
                        "resample"},
                       file, "suite");
    auto& u = c.suite;
    take(s, "raking", u.raking, file);
    take(s, "multilevel", u.multilevel, file);
    take(s, "multilevel_order", u.multilevel_order, file);
    if (s.contains("multilevel_lambda")) u.multilevel_lambda = detail::json_real(s["multilevel_lambda"], file, "multilevel_lambda");
    take(s, "poststrat", u.poststrat, file);
    take(s, "ridge", u.ridge, file);
    take(s, "ridge_order", u.ridge_order, file);
    if (s.contains("ridge_penalty")) {
      if (s["ridge_penalty"] == "cv")
        c.ridge_cv = true;
      else
        u.ridge_penalty = detail::json_real(s["ridge_penalty"], file, "ridge_penalty");
    }
    take(s, "trees", u.trees, file);
    take(s, "num_trees", u.tree_options.num_trees, file);
    take(s, "tree_depth", u.tree_options.depth, file);
    if (s.contains("bounds")) {
      const auto& b = s["bounds"];
      if (!b.is_array() || b.size() != 2) throw IoError(file, 0, "'bounds' must be [L, U]");
      u.bounds = {detail::json_real(b[0], file, "bounds"), detail::json_real(b[1], file, "bounds")};
    }
    take(s, "alpha", u.alpha, file);
    take(s, "resample", u.resample, file);
  }
  if (c.reps < 1) throw IoError(file, 0, "'reps' must be at least 1");
  return c;
}

inline Json simulation_config_to_json(const SimulationConfig& c) {
  Json j;
  j["schema"] = c.schema ? schema_to_json(*c.schema) : Json(c.schema_preset);
  if (c.dgp == "fourth_order") {
    const auto& f = c.fourth_order;
    j["dgp"] = {{"kind", c.dgp},
                {"population_size", f.population_size},
                {"response_scale", num(f.response_scale)},
                {"response_rate", num(f.response_rate)},
                {"outcome_scale", num(f.outcome_scale)},
                {"correlation", num(f.correlation)},
                {"tau", f.tau},
                {"seed", f.seed},
                {"census", c.census}};
  } else {
    const auto& v = c.coverage;
    j["dgp"] = {{"kind", c.dgp},
                {"population_size", v.population_size},
                {"response_scale", num(v.response_scale)},
                {"response_rate", num(v.response_rate)},
                {"noise_sd", num(v.noise_sd)},
                {"seed", v.seed},
                {"census", c.census}};
  }
  j["design_order"] = c.order_for(c.make_schema());
  const auto& u = c.suite;
  j["suite"] = {{"raking", u.raking},
                {"multilevel", u.multilevel},
                {"multilevel_order", u.multilevel_order},
                {"multilevel_lambda", num(u.multilevel_lambda)},
                {"poststrat", u.poststrat},
                {"ridge", u.ridge},
                {"ridge_order", u.ridge_order},
                {"ridge_penalty", c.ridge_cv ? Json("cv") : num(u.ridge_penalty)},
                {"trees", u.trees},
                {"num_trees", u.tree_options.num_trees},
                {"tree_depth", u.tree_options.depth},
                {"bounds", {num(u.bounds.lower), num(u.bounds.upper)}},
                {"alpha", num(u.alpha)},
                {"resample", u.resample}};
  j["reps"] = c.reps;
  j["seed"] = c.seed;
  return j;
}

inline std::string results_csv(const SimResult& r) {
  std::string out = "estimator,replications,failures,bias,bias_se,rmse,coverage,mean_n_eff\n";
  for (const auto& e : r.estimators)
    out += e.name + "," + std::to_string(e.replications) + "," + std::to_string(e.failures) + "," +
           format_number(e.bias) + "," + format_number(e.bias_se) + "," + format_number(e.rmse) + "," +
           format_number(e.coverage) + "," + format_number(e.mean_n_eff) + "\n";
  return out;
}

inline Json simulation_summary_json(const SimResult& r, const SimulationConfig& cfg, double ridge_penalty) {
  Json est = Json::array();
  for (const auto& e : r.estimators) {
    Json x = {{"name", e.name}, {"replications", e.replications}, {"failures", e.failures}};
    if (e.failures) x["first_failure"] = e.first_failure;
    est.push_back(x);
  }
  return {{"config", simulation_config_to_json(cfg)},
          {"ridge_penalty_used", num(ridge_penalty)},
          {"replications", r.replications},
          {"seed", r.seed},
          {"pi_min", num(r.pi_min)},
          {"mean_respondents", num(r.mean_respondents)},
          {"max_weighting_identity_residual", num(r.max_weighting_identity_residual)},
          {"max_drp_identity_residual", num(r.max_drp_identity_residual)},
          {"estimators", est}};
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace mlcal::io
