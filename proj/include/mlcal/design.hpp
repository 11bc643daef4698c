#pragma once

#include <bit>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "mlcal/common.hpp"

namespace mlcal {

struct Covariate {
  std::string name;
  std::vector<std::string> labels;

  std::size_t levels() const noexcept { return labels.size(); }
};

/// Ordered list of categorical covariates. Cells are indexed in mixed radix
/// with the last covariate varying fastest. Level 0 of every covariate is the
/// reference level of the interaction coding.
class CovariateSchema {
 public:
  static constexpr std::size_t kMaxCovariates = 20;

  CovariateSchema() = default;

  explicit CovariateSchema(std::vector<Covariate> covariates) : covariates_(std::move(covariates)) {
    if (covariates_.empty()) throw SchemaError("schema needs at least one covariate");
    if (covariates_.size() > kMaxCovariates) throw SchemaError("schema supports at most 20 covariates");
    std::unordered_set<std::string> names;
    levels_.reserve(covariates_.size());
    for (const auto& c : covariates_) {
      if (c.name.empty()) throw SchemaError("covariate with empty name");
      if (!names.insert(c.name).second) throw SchemaError("duplicate covariate name '" + c.name + "'");
      if (c.levels() < 2) throw SchemaError("covariate '" + c.name + "' needs at least 2 levels");
      std::unordered_set<std::string> seen;
      for (const auto& l : c.labels)
        if (!seen.insert(l).second) throw SchemaError("duplicate level '" + l + "' in covariate '" + c.name + "'");
      levels_.push_back(c.levels());
    }
    strides_.assign(levels_.size(), 1);
    num_cells_ = 1;
    for (std::size_t i = levels_.size(); i-- > 0;) {
      strides_[i] = num_cells_;
      if (num_cells_ > (std::size_t{1} << 32) / levels_[i]) throw SchemaError("too many cells");
      num_cells_ *= levels_[i];
    }
  }

  /// Schema with generated names x1..xd and labels "0".."J_l - 1".
  static CovariateSchema from_levels(std::span<const std::size_t> levels) {
    std::vector<Covariate> covs;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      Covariate c{"x" + std::to_string(i + 1), {}};
      for (std::size_t l = 0; l < levels[i]; ++l) c.labels.push_back(std::to_string(l));
      covs.push_back(std::move(c));
    }
    return CovariateSchema(std::move(covs));
  }
  static CovariateSchema from_levels(std::initializer_list<std::size_t> levels) {
    std::vector<std::size_t> v(levels);
    return from_levels(std::span<const std::size_t>(v));
  }

  std::size_t num_covariates() const noexcept { return covariates_.size(); }
  std::size_t num_cells() const noexcept { return num_cells_; }
  const Covariate& covariate(std::size_t i) const { return covariates_.at(i); }
  std::span<const Covariate> covariates() const noexcept { return covariates_; }
  std::span<const std::size_t> levels() const noexcept { return levels_; }
  std::size_t stride(std::size_t i) const noexcept { return strides_[i]; }

  std::optional<std::size_t> find_covariate(std::string_view name) const {
    for (std::size_t i = 0; i < covariates_.size(); ++i)
      if (covariates_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t level_index(std::size_t cov, std::string_view label) const {
    const auto& labels = covariates_.at(cov).labels;
    for (std::size_t l = 0; l < labels.size(); ++l)
      if (labels[l] == label) return l;
    throw SchemaError("unknown level '" + std::string(label) + "' for covariate '" + covariates_[cov].name + "'");
  }

  bool operator==(const CovariateSchema& o) const {
    if (covariates_.size() != o.covariates_.size()) return false;
    for (std::size_t i = 0; i < covariates_.size(); ++i)
      if (covariates_[i].name != o.covariates_[i].name || covariates_[i].labels != o.covariates_[i].labels)
        return false;
    return true;
  }

 private:
  std::vector<Covariate> covariates_;
  std::vector<std::size_t> levels_;
  std::vector<std::size_t> strides_;
  std::size_t num_cells_ = 0;
};

struct CellId {
  std::size_t index = 0;
  std::vector<std::size_t> levels;
};

inline CellId encode_cell(const CovariateSchema& schema, std::span<const std::size_t> levels) {
  if (levels.size() != schema.num_covariates())
    throw SchemaError("expected " + std::to_string(schema.num_covariates()) + " levels, got " +
                      std::to_string(levels.size()));
  std::size_t index = 0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] >= schema.levels()[i])
      throw SchemaError("level " + std::to_string(levels[i]) + " out of range for covariate '" +
                        schema.covariate(i).name + "'");
    index += levels[i] * schema.stride(i);
  }
  return CellId{index, std::vector<std::size_t>(levels.begin(), levels.end())};
}

inline CellId decode_cell(const CovariateSchema& schema, std::size_t index) {
  if (index >= schema.num_cells()) throw SchemaError("cell index " + std::to_string(index) + " out of range");
  CellId id{index, std::vector<std::size_t>(schema.num_covariates())};
  for (std::size_t i = 0; i < schema.num_covariates(); ++i) id.levels[i] = (index / schema.stride(i)) % schema.levels()[i];
  return id;
}

inline std::size_t cell_level(const CovariateSchema& schema, std::size_t cell, std::size_t cov) noexcept {
  return (cell / schema.stride(cov)) % schema.levels()[cov];
}

/// Population and respondent counts per cell, plus respondent outcome sums.
/// Counts are stored as doubles so weighted population totals are accepted.
struct CellTable {
  CovariateSchema schema;
  std::vector<double> pop_counts;
  std::vector<double> resp_counts;
  std::optional<std::vector<double>> resp_sums;
  std::optional<std::vector<double>> resp_sumsq;

  std::size_t num_cells() const noexcept { return pop_counts.size(); }
  bool has_outcomes() const noexcept { return resp_sums.has_value(); }

  double population_size() const {
    CompensatedSum s;
    for (double v : pop_counts) s.add(v);
    return s.value();
  }
  double respondent_size() const {
    CompensatedSum s;
    for (double v : resp_counts) s.add(v);
    return s.value();
  }

  /// Respondent mean in cell s; requires resp_counts[s] > 0.
  double cell_mean(std::size_t s) const {
    if (!resp_sums) throw std::logic_error("cell table has no outcomes");
    if (!(resp_counts[s] > 0)) throw std::logic_error("cell " + std::to_string(s) + " has no respondents");
    return (*resp_sums)[s] / resp_counts[s];
  }

  void validate() const {
    const std::size_t J = schema.num_cells();
    if (pop_counts.size() != J || resp_counts.size() != J) throw SchemaError("cell table length does not match schema");
    if (resp_sums && resp_sums->size() != J) throw SchemaError("outcome sums length does not match schema");
    if (resp_sumsq && resp_sumsq->size() != J) throw SchemaError("outcome squares length does not match schema");
    for (std::size_t s = 0; s < J; ++s) {
      if (!(pop_counts[s] >= 0) || !std::isfinite(pop_counts[s])) throw SchemaError("invalid population count");
      if (!(resp_counts[s] >= 0) || !std::isfinite(resp_counts[s])) throw SchemaError("invalid respondent count");
      if (resp_sums && resp_counts[s] == 0 && (*resp_sums)[s] != 0)
        throw SchemaError("outcome sum present in a cell without respondents");
    }
    if (!(population_size() > 0)) throw SchemaError("empty population");
  }
};

struct MicroRow {
  std::vector<std::size_t> levels;
  bool respondent = false;
  std::optional<double> outcome;
};

/// Tabulates unit records into cell counts. Row numbers in errors are 1-based.
inline CellTable tabulate(const CovariateSchema& schema, std::span<const MicroRow> rows) {
  if (rows.empty()) throw IngestError("empty population");
  const std::size_t J = schema.num_cells();
  CellTable t{schema, std::vector<double>(J, 0.0), std::vector<double>(J, 0.0), std::nullopt, std::nullopt};
  bool any_outcome = false;
  for (const auto& r : rows)
    if (r.respondent && r.outcome) any_outcome = true;
  if (any_outcome) {
    t.resp_sums.emplace(J, 0.0);
    t.resp_sumsq.emplace(J, 0.0);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::size_t cell;
    try {
      cell = encode_cell(schema, r.levels).index;
    } catch (const SchemaError& e) {
      throw IngestError(e.what(), i + 1);
    }
    if (!r.respondent && r.outcome) throw IngestError("outcome given for a non-respondent", i + 1);
    if (r.respondent && any_outcome && !r.outcome) throw IngestError("respondent without outcome", i + 1);
    if (r.outcome && !std::isfinite(*r.outcome)) throw IngestError("non-finite outcome", i + 1);
    t.pop_counts[cell] += 1.0;
    if (r.respondent) {
      t.resp_counts[cell] += 1.0;
      if (any_outcome) {
        (*t.resp_sums)[cell] += *r.outcome;
        (*t.resp_sumsq)[cell] += *r.outcome * *r.outcome;
      }
    }
  }
  return t;
}

/// One group of interaction columns: all products of non-reference indicators
/// over one covariate subset. The intercept is the group with empty subset.
struct ColumnGroup {
  std::uint32_t subset = 0;
  std::size_t order = 0;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::vector<std::size_t> covariates;
};

/// Hierarchical interaction design D = [D^(1) ... D^(K)] under reference-cell
/// coding. Rows are never stored; the nonzero columns of a cell are
/// enumerated from its non-reference covariates.
class InteractionDesign {
 public:
  InteractionDesign() = default;

  InteractionDesign(const CovariateSchema& schema, std::size_t max_order) : schema_(schema), max_order_(max_order) {
    const std::size_t d = schema.num_covariates();
    if (max_order < 1 || max_order > d)
      throw SchemaError("max_order must lie in [1, " + std::to_string(d) + "]");
    group_by_subset_.assign(std::size_t{1} << d, kNoGroup);
    block_offsets_.assign(max_order + 2, 0);
    groups_.push_back(ColumnGroup{0, 1, 0, 1, {}});
    group_by_subset_[0] = 0;
    std::size_t offset = 1;
    for (std::size_t k = 1; k <= max_order; ++k) {
      block_offsets_[k] = (k == 1) ? 0 : offset;
      std::vector<std::size_t> combo(k);
      std::iota(combo.begin(), combo.end(), 0);
      for (;;) {
        ColumnGroup g;
        g.order = k;
        g.offset = offset;
        g.covariates = combo;
        g.size = 1;
        for (auto c : combo) {
          g.subset |= 1u << c;
          g.size *= schema.levels()[c] - 1;
        }
        offset += g.size;
        group_by_subset_[g.subset] = groups_.size();
        groups_.push_back(std::move(g));
        // next combination in lexicographic order
        std::size_t i = k;
        while (i > 0 && combo[i - 1] == d - k + i - 1) --i;
        if (i == 0) break;
        ++combo[i - 1];
        for (std::size_t j = i; j < k; ++j) combo[j] = combo[j - 1] + 1;
      }
    }
    block_offsets_[max_order + 1] = offset;
    num_columns_ = offset;
  }

  const CovariateSchema& schema() const noexcept { return schema_; }
  std::size_t max_order() const noexcept { return max_order_; }
  std::size_t num_columns() const noexcept { return num_columns_; }
  std::size_t num_rows() const noexcept { return schema_.num_cells(); }
  std::span<const ColumnGroup> groups() const noexcept { return groups_; }

  /// First column of block k (1-based); block_begin(max_order+1) == num_columns().
  std::size_t block_begin(std::size_t k) const { return block_offsets_.at(k); }
  std::size_t block_end(std::size_t k) const { return block_offsets_.at(k + 1); }
  std::size_t block_size(std::size_t k) const { return block_end(k) - block_begin(k); }

  std::size_t order_of_column(std::size_t col) const {
    for (std::size_t k = 1; k <= max_order_; ++k)
      if (col < block_end(k)) return k;
    throw std::out_of_range("column index out of range");
  }

  /// Calls f(column) for every column with D[cell, column] = 1 and order <= max_k.
  template <class F>
  void for_each_column(std::size_t cell, F&& f, std::size_t max_k = 0) const {
    if (max_k == 0 || max_k > max_order_) max_k = max_order_;
    const std::size_t d = schema_.num_covariates();
    std::uint32_t nonref = 0;
    std::size_t lv[CovariateSchema::kMaxCovariates];
    for (std::size_t c = 0; c < d; ++c) {
      lv[c] = cell_level(schema_, cell, c);
      if (lv[c] != 0) nonref |= 1u << c;
    }
    f(std::size_t{0});
    if (nonref == 0) return;
    // enumerate nonempty submasks of nonref
    for (std::uint32_t sub = nonref; sub; sub = (sub - 1) & nonref) {
      if (static_cast<std::size_t>(std::popcount(sub)) > max_k) continue;
      const auto& g = groups_[group_by_subset_[sub]];
      std::size_t local = 0;
      for (auto c : g.covariates) local = local * (schema_.levels()[c] - 1) + (lv[c] - 1);
      f(g.offset + local);
    }
  }

  double row_dot(std::size_t cell, std::span<const double> beta, std::size_t max_k = 0) const {
    double s = 0.0;
    for_each_column(cell, [&](std::size_t j) { s += beta[j]; }, max_k);
    return s;
  }

  void add_row(std::size_t cell, double scale, std::span<double> out, std::size_t max_k = 0) const {
    for_each_column(cell, [&](std::size_t j) { out[j] += scale; }, max_k);
  }

  /// Sorted column indices of row `cell`.
  std::vector<std::size_t> row_columns(std::size_t cell, std::size_t max_k = 0) const {
    std::vector<std::size_t> cols;
    for_each_column(cell, [&](std::size_t j) { cols.push_back(j); }, max_k);
    std::sort(cols.begin(), cols.end());
    return cols;
  }

  /// D^T v over all cells, for columns of order <= max_k.
  std::vector<double> transpose_times(std::span<const double> v, std::size_t max_k = 0) const {
    std::vector<double> out(max_k == 0 ? num_columns_ : block_end(std::min(max_k, max_order_)), 0.0);
    for (std::size_t s = 0; s < v.size(); ++s)
      if (v[s] != 0.0) add_row(s, v[s], out, max_k);
    return out;
  }

  /// Sparse column-major block D^(k), shape J x m_k.
  Eigen::SparseMatrix<double> block(std::size_t k) const {
    const std::size_t lo = block_begin(k), hi = block_end(k);
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t s = 0; s < num_rows(); ++s)
      for_each_column(s, [&](std::size_t j) {
        if (j >= lo && j < hi) trip.emplace_back(static_cast<int>(s), static_cast<int>(j - lo), 1.0);
      });
    Eigen::SparseMatrix<double> m(static_cast<Eigen::Index>(num_rows()), static_cast<Eigen::Index>(hi - lo));
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
  }

  /// Dense assembled D (J x num_columns); intended for small schemas.
  Eigen::MatrixXd dense() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(num_rows()),
                                              static_cast<Eigen::Index>(num_columns_));
    for (std::size_t s = 0; s < num_rows(); ++s)
      for_each_column(s, [&](std::size_t j) { m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) = 1.0; });
    return m;
  }

  const ColumnGroup& group_of_column(std::size_t col) const {
    auto it = std::upper_bound(groups_.begin(), groups_.end(), col,
                               [](std::size_t c, const ColumnGroup& g) { return c < g.offset; });
    return *std::prev(it);
  }

  /// Human-readable name, e.g. "age=35-44:party=R"; the intercept is "(intercept)".
  std::string column_label(std::size_t col) const {
    const auto& g = group_of_column(col);
    if (g.subset == 0) return "(intercept)";
    std::size_t local = col - g.offset;
    std::vector<std::size_t> lv(g.covariates.size());
    for (std::size_t i = g.covariates.size(); i-- > 0;) {
      const std::size_t base = schema_.levels()[g.covariates[i]] - 1;
      lv[i] = local % base + 1;
      local /= base;
    }
    std::string out;
    for (std::size_t i = 0; i < g.covariates.size(); ++i) {
      const auto& cov = schema_.covariate(g.covariates[i]);
      if (i) out += ':';
      out += cov.name + "=" + cov.labels[lv[i]];
    }
    return out;
  }

 private:
  static constexpr std::size_t kNoGroup = static_cast<std::size_t>(-1);

  CovariateSchema schema_;
  std::size_t max_order_ = 0;
  std::size_t num_columns_ = 0;
  std::vector<ColumnGroup> groups_;
  std::vector<std::size_t> group_by_subset_;
  std::vector<std::size_t> block_offsets_;
};

struct DesignDiagnostics {
  bool computed = false;
  std::size_t rows = 0;
  std::size_t columns = 0;
  std::size_t rank = 0;
  double condition_number = kInf;
  double max_singular_value = 0.0;
  double min_singular_value = 0.0;
  bool rank_deficient = false;
};

/// Rank and condition number of the assembled D from a dense SVD. Skipped
/// (computed = false) when either dimension exceeds `dense_limit`.
inline DesignDiagnostics design_diagnostics(const InteractionDesign& design, std::size_t dense_limit = 2000) {
  DesignDiagnostics out;
  out.rows = design.num_rows();
  out.columns = design.num_columns();
  if (out.rows > dense_limit || out.columns > dense_limit) return out;
  const Eigen::MatrixXd D = design.dense();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(D);
  const auto& sv = svd.singularValues();
  const double tol = std::max(D.rows(), D.cols()) * sv(0) * std::numeric_limits<double>::epsilon();
  out.rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++out.rank;
  out.max_singular_value = sv(0);
  out.min_singular_value = sv(sv.size() - 1);
  out.condition_number = out.min_singular_value > tol ? out.max_singular_value / out.min_singular_value : kInf;
  out.rank_deficient = out.rank < out.rows;
  out.computed = true;
  return out;
}

}  // namespace mlcal
