#include <gtest/gtest.h>

#include <filesystem>

#include "mlcal/io.hpp"
#include "support.hpp"

using namespace mlcal;
using io::IoError;
using io::Json;

namespace {

std::string tmp_file(const std::string& name, const std::string& text) {
  const auto dir = std::filesystem::temp_directory_path() / "mlcal_test_io";
  std::filesystem::create_directories(dir);
  const auto p = (dir / name).string();
  io::write_text(p, text);
  return p;
}

CovariateSchema two_group() { return CovariateSchema({{"group", {"a", "b"}}}); }

CovariateSchema sex_age() { return CovariateSchema({{"sex", {"m", "f"}}, {"age", {"young", "mid", "old"}}}); }

template <class F>
IoError expect_io_error(F&& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e;
  }
  ADD_FAILURE() << "no IoError thrown";
  return IoError("", 0, "");
}

}  // namespace

TEST(Csv, QuotesBlankLinesAndCrlf) {
  const auto t = io::parse_csv("a,b,c\r\n\r\n1, \"x,y\" ,\"say \"\"hi\"\"\"\r\n 2 ,,3\n", "f.csv");
  ASSERT_EQ(t.header, (std::vector<std::string>{"a", "b", "c"}));
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][1], "x,y");
  EXPECT_EQ(t.rows[0][2], "say \"hi\"");
  EXPECT_EQ(t.rows[1][0], "2");
  EXPECT_EQ(t.rows[1][1], "");
  EXPECT_EQ(t.lines, (std::vector<std::size_t>{3, 4}));
}

TEST(Csv, ErrorsCarryLineNumbers) {
  auto e = expect_io_error([] { io::parse_csv("a,b\n1,2\n3\n", "f.csv"); });
  EXPECT_EQ(e.line(), 3u);
  EXPECT_NE(std::string(e.what()).find("f.csv:3"), std::string::npos);
  e = expect_io_error([] { io::parse_csv("a,a\n", "g.csv"); });
  EXPECT_EQ(e.line(), 1u);
  expect_io_error([] { io::parse_csv("", "h.csv"); });
  expect_io_error([] { io::parse_csv("a\n\"open\n", "h.csv"); });
  e = expect_io_error([] { io::read_csv("/nonexistent/file.csv"); });
  EXPECT_NE(std::string(e.what()).find("cannot open"), std::string::npos);
}

TEST(Schema, RoundTripsThroughJson) {
  const auto s = sex_age();
  const auto j = io::schema_to_json(s);
  EXPECT_EQ(io::schema_from_json(j), s);
  const auto p = tmp_file("schema.json", io::dump(j));
  EXPECT_EQ(io::read_schema(p), s);
}

TEST(Schema, RejectsMalformedInput) {
  expect_io_error([] { io::schema_from_json(Json::parse(R"({"covs": []})")); });
  expect_io_error([] { io::schema_from_json(Json::parse(R"({"covariates": [{"name": "x"}]})")); });
  expect_io_error([] { io::schema_from_json(Json::parse(R"({"covariates": [{"name": "x", "levels": [1, 2]}]})")); });
  expect_io_error([] { io::schema_from_json(Json::parse(R"({"covariates": [{"name": "x", "levels": ["a"]}]})")); });
  const auto p = tmp_file("bad.json", "{not json");
  expect_io_error([&] { io::read_schema(p); });
}

TEST(Microdata, TabulatesCountsAndOutcomes) {
  const auto p = tmp_file("m.csv",
                          "age,sex,respondent,outcome\n"
                          "young,m,1,2\nyoung,m,1,4\nyoung,m,0,\nold,f,1,1.5\nold,f,0,NA\nmid,f,0,\n");
  const auto t = io::read_microdata(p, sex_age());
  const auto s = sex_age();
  auto cell = [&](std::size_t a, std::size_t b) { return encode_cell(s, std::vector<std::size_t>{a, b}).index; };
  const auto ym = cell(0, 0), of = cell(1, 2), mf = cell(1, 1);
  EXPECT_EQ(t.pop_counts[ym], 3.0);
  EXPECT_EQ(t.resp_counts[ym], 2.0);
  EXPECT_EQ(t.cell_mean(ym), 3.0);
  EXPECT_EQ(t.pop_counts[of], 2.0);
  EXPECT_EQ(t.resp_counts[of], 1.0);
  EXPECT_EQ(t.pop_counts[mf], 1.0);
  EXPECT_EQ(t.resp_counts[mf], 0.0);
  EXPECT_EQ(t.population_size(), 6.0);
}

TEST(Microdata, RespondentColumnOptional) {
  const auto p = tmp_file("r.csv", "group\na\nb\nb\n");
  const auto t = io::read_microdata(p, two_group());
  EXPECT_EQ(t.resp_counts, (std::vector<double>{1, 2}));
  EXPECT_FALSE(t.has_outcomes());
}

TEST(Microdata, ErrorsPointAtTheRow) {
  auto e = expect_io_error([] { io::read_microdata(tmp_file("e1.csv", "group,respondent\na,1\nz,0\n"), two_group()); });
  EXPECT_EQ(e.line(), 3u);
  EXPECT_NE(std::string(e.what()).find("unknown level 'z'"), std::string::npos);
  e = expect_io_error([] { io::read_microdata(tmp_file("e2.csv", "group,respondent\na,1\nb,yes\n"), two_group()); });
  EXPECT_EQ(e.line(), 3u);
  e = expect_io_error(
      [] { io::read_microdata(tmp_file("e3.csv", "group,respondent,outcome\na,1,1\n\nb,1,\n"), two_group()); });
  EXPECT_EQ(e.line(), 4u);
  EXPECT_NE(std::string(e.what()).find("respondent without outcome"), std::string::npos);
  e = expect_io_error(
      [] { io::read_microdata(tmp_file("e4.csv", "group,respondent,outcome\na,1,abc\n"), two_group()); });
  EXPECT_EQ(e.line(), 2u);
  e = expect_io_error([] { io::read_microdata(tmp_file("e5.csv", "grp,respondent\na,1\n"), two_group()); });
  EXPECT_NE(std::string(e.what()).find("missing covariate column 'group'"), std::string::npos);
  expect_io_error([] { io::read_microdata(tmp_file("e6.csv", "group,respondent\n"), two_group()); });
}

TEST(PopCounts, AggregatesAndValidates) {
  const auto c = io::read_pop_counts(tmp_file("c.csv", "group,count\na,10\nb,5\na,2.5\n"), two_group());
  EXPECT_EQ(c, (std::vector<double>{12.5, 5}));
  auto e = expect_io_error([] { io::read_pop_counts(tmp_file("c2.csv", "group,count\na,10\nb,-1\n"), two_group()); });
  EXPECT_EQ(e.line(), 3u);
  expect_io_error([] { io::read_pop_counts(tmp_file("c3.csv", "group,n\na,10\n"), two_group()); });
  expect_io_error([] { io::read_pop_counts(tmp_file("c4.csv", "group,count\na,0\n"), two_group()); });
}

TEST(PopCounts, SampleWithCountsMatchesFullMicrodata) {
  const std::string dir = MLCAL_DATA_DIR "/two_cell/";
  const auto schema = io::read_schema(dir + "schema.json");
  const auto full = io::read_microdata(dir + "microdata.csv", schema);
  const auto split = io::read_sample_with_counts(dir + "respondents.csv", dir + "pop_counts.csv", schema);
  EXPECT_EQ(full.pop_counts, split.pop_counts);
  EXPECT_EQ(full.resp_counts, split.resp_counts);
  EXPECT_EQ(*full.resp_sums, *split.resp_sums);
}

TEST(Output, WeightsCsvLayout) {
  CellTable t{two_group(), {60, 40}, {10, 10}, std::nullopt, std::nullopt};
  EXPECT_EQ(io::weights_csv(t, std::vector<double>{6, 4}), "cell,group,n,N,gamma,weight\n0,a,10,60,6,0.6\n1,b,10,40,4,0.4\n");
  CellTable e{two_group(), {60, 40}, {10, 0}, std::nullopt, std::nullopt};
  EXPECT_EQ(io::weights_csv(e, std::vector<double>{6, 9}), "cell,group,n,N,gamma,weight\n0,a,10,60,6,0.6\n1,b,0,40,0,0\n");
}

TEST(Output, NumbersAreLosslessAndLocaleFree) {
  const double v = 0.123456789012345678;
  const Json j = {{"x", v}, {"inf", io::num(kInf)}, {"nan", io::num(std::nan(""))}, {"neg", io::num(-kInf)}};
  const auto back = Json::parse(io::dump(j));
  EXPECT_EQ(back["x"].get<double>(), v);
  EXPECT_EQ(back["inf"], "inf");
  EXPECT_EQ(back["nan"], "nan");
  EXPECT_EQ(back["neg"], "-inf");
  const std::string s = format_number(v);
  EXPECT_GE(s.size() - 2, 12u);
  EXPECT_EQ(parse_number(s), v);
}

TEST(Output, DiagnosticsCarrySolverState) {
  const auto schema = CovariateSchema::from_levels({2, 3});
  std::mt19937_64 rng(3);
  const auto t = mltest::random_table(schema, rng, 0.0);
  InteractionDesign d(schema, 2);
  const auto spec = CalibrationSpec::multilevel(2, 0.1);
  const auto sol = calibrate(d, t, spec);
  const auto j = io::diagnostics_json(sol, d, t, spec);
  EXPECT_EQ(j["status"], "converged");
  EXPECT_EQ(j["imbalance_by_order"].size(), 2u);
  EXPECT_EQ(j["stationarity"].size(), 1u);
  EXPECT_LE(std::abs(j["duality_gap"].get<double>()), 1e-8);
  EXPECT_EQ(j["spec"]["lambda"][0].get<double>(), 0.1);
  EXPECT_EQ(j["spec"]["bounds"][1], "inf");
}

TEST(Output, TradeoffCsvMarksSelection) {
  const auto schema = CovariateSchema::from_levels({2, 4, 3});
  std::mt19937_64 rng(5);
  const auto t = mltest::random_table(schema, rng, 0.1);
  InteractionDesign d(schema, 3);
  const auto curve = sweep_tradeoff(d, t, default_lambda_grid(24, 9), 3);
  const auto csv = io::parse_csv(io::tradeoff_csv(curve), "curve");
  ASSERT_EQ(csv.rows.size(), 10u);
  EXPECT_EQ(csv.rows[0][0], "raking");
  std::size_t flagged = 0;
  for (std::size_t r = 1; r < csv.rows.size(); ++r)
    if (csv.rows[r][6] == "1") {
      ++flagged;
      ASSERT_TRUE(curve.selected);
      EXPECT_EQ(r - 1, *curve.selected);
    }
  EXPECT_EQ(flagged, curve.selected ? 1u : 0u);
  const auto j = io::sweep_to_json(curve);
  EXPECT_EQ(j["points"], 9u);
}

TEST(SimulationConfig, DefaultsAndOverrides) {
  const auto c = io::simulation_config_from_json(Json::parse(R"({
      "schema": "election",
      "dgp": {"kind": "fourth_order", "population_size": 1234, "tau": [0.1, 0.1, 0.1, 0.1], "census": true},
      "suite": {"ridge_penalty": "cv", "bounds": [0, "inf"], "trees": true, "num_trees": 7},
      "reps": 3, "seed": 9})"));
  EXPECT_EQ(c.schema_preset, "election");
  EXPECT_EQ(c.dgp, "fourth_order");
  EXPECT_EQ(c.fourth_order.population_size, 1234u);
  EXPECT_TRUE(c.census);
  EXPECT_TRUE(c.ridge_cv);
  EXPECT_EQ(c.suite.bounds.upper, kInf);
  EXPECT_EQ(c.suite.tree_options.num_trees, 7u);
  EXPECT_EQ(c.reps, 3u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.make_schema().num_cells(), 51840u);
  EXPECT_EQ(c.order_for(c.make_schema()), 4u);
  const auto d = io::simulation_config_from_json(Json::object());
  EXPECT_EQ(d.dgp, "coverage");
  EXPECT_EQ(d.order_for(d.make_schema()), 3u);
}

TEST(SimulationConfig, RoundTrip) {
  const auto c = io::simulation_config_from_json(
      Json::parse(R"({"schema": {"covariates": [{"name": "a", "levels": ["x", "y"]}, {"name": "b", "levels": ["1", "2", "3"]}]},
                      "dgp": {"kind": "coverage", "noise_sd": 0.5}, "suite": {"multilevel_lambda": "inf"}, "reps": 4})"));
  const auto j = io::simulation_config_to_json(c);
  const auto again = io::simulation_config_from_json(j);
  EXPECT_EQ(io::simulation_config_to_json(again), j);
  EXPECT_EQ(again.suite.multilevel_lambda, kInf);
  EXPECT_EQ(again.coverage.noise_sd, 0.5);
}

TEST(SimulationConfig, RejectsUnknownOrMisplacedKeys) {
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"rep": 3})")); });
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"schema": "tiny"})")); });
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"dgp": {"kind": "forest"}})")); });
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"dgp": {"kind": "coverage", "tau": [1]}})")); });
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"suite": {"alpha": "x"}})")); });
  expect_io_error([] { io::simulation_config_from_json(Json::parse(R"({"reps": 0})")); });
}

TEST(Output, ResultsCsvHasOneRowPerEstimator) {
  SimResult r;
  r.estimators.push_back({"raking", 10, 1, -0.5, 0.01, 0.6, 0.9, 100.0, "x"});
  r.estimators.push_back({"oracle_ht", 11, 0, 0.25, 0.02, 0.3, std::nan(""), std::nan(""), ""});
  EXPECT_EQ(io::results_csv(r),
            "estimator,replications,failures,bias,bias_se,rmse,coverage,mean_n_eff\n"
            "raking,10,1,-0.5,0.01,0.6,0.9,100\n"
            "oracle_ht,11,0,0.25,0.02,0.3,nan,nan\n");
}
