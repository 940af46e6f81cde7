#pragma once

// Batch screening: multi-view CSV ingestion, testing-unit tuples, parallel test runs and outputs.

#include "mvkm/glm.hpp"
#include "mvkm/inference.hpp"
#include "mvkm/kernels.hpp"
#include "mvkm/simulation.hpp"
#include "mvkm/varcomp.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mvkm {

struct ViewConfig {
  std::string name;
  std::filesystem::path file;
  ViewKind kind = ViewKind::numeric;
  KernelSpec kernel;
  // Feature-to-unit assignment: a CSV of (feature, unit) rows, or a delimiter splitting the
  // feature name as "<unit><delimiter><rest>". Neither means the whole view is one unit.
  std::optional<std::filesystem::path> groups;
  std::optional<std::string> group_delimiter;
};

struct TestRequest {
  TestKind kind = TestKind::overall;
  int order = 0;  // interaction/composite term order; 0 means m for composite
};

struct RunConfig {
  int schema_version = 1;
  std::vector<ViewConfig> views;
  std::optional<std::filesystem::path> covariates;
  std::filesystem::path phenotype;
  std::optional<std::string> phenotype_column;
  FamilyKind family = FamilyKind::binomial_logit;
  std::vector<TestRequest> tests;
  double alpha = 0.05;
  bool adjust = true;
  std::filesystem::path output_dir = "mvkm_out";
  int workers = 1;
  std::uint64_t seed = 1;
  std::uint64_t max_tuples = 10'000'000;
  // Run composite tests only on tuples whose overall test has p <= alpha.
  bool gate_composite_on_overall = false;
  RemlOptions reml;
  CompositeVariance composite_variance = CompositeVariance::orthogonal_score;

  void validate() const;
};

/// The "reml" block of a config: start_grid, moment_start, tolerance, max_iterations, information.
RemlOptions parse_reml_options(const nlohmann::json& block);
nlohmann::json to_json(const RemlOptions& options);

/// Parses a config document. Relative paths resolve against `base_dir`. Unknown keys, a wrong
/// schema_version or invalid values throw config-error.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical JSON form (absolute paths, every field present); input to the config hash.
nlohmann::json to_json(const RunConfig& cfg);

/// 64-bit FNV-1a of `text`, as 16 lower-case hex digits.
std::string fnv1a_hex(std::string_view text);

struct UnitIndex {
  std::vector<std::string> unit_ids;                // order of first appearance among the columns
  std::vector<std::vector<Eigen::Index>> columns;   // per unit, its feature columns in the view
};

struct LoadedData {
  MultiViewDataset data;
  std::vector<std::string> view_names;
  std::vector<UnitIndex> units;  // one per view
  std::vector<std::string> dropped_subjects;
};

/// Reads every file, inner-joins subjects on their ids (order of the phenotype file), appends an
/// intercept column to the covariates, and groups each view's features into testing units.
LoadedData load_dataset(const RunConfig& cfg);

/// The Cartesian product of per-view unit indices, in lexicographic order (last view fastest).
class TupleSpace {
 public:
  explicit TupleSpace(std::vector<std::size_t> unit_counts);

  std::uint64_t size() const { return size_; }
  std::vector<int> at(std::uint64_t index) const;
  const std::vector<std::size_t>& unit_counts() const { return counts_; }

 private:
  std::vector<std::size_t> counts_;
  std::uint64_t size_ = 0;
};

/// Product of the counts, saturating at UINT64_MAX.
std::uint64_t tuple_count(const std::vector<std::size_t>& unit_counts);

/// Throws tuple-cap-exceeded (with the count) when the product exceeds `cap`, and
/// insufficient-data when a view has no units.
TupleSpace enumerate_tuples(const std::vector<std::size_t>& unit_counts, std::uint64_t cap);

struct TestColumn {
  TestKind kind = TestKind::overall;
  EffectTerm term;
  std::string label;  // "overall", "marginal_1", "interaction_1x2", "composite_1x2x3"
  std::vector<EffectTerm> null_terms;  // composite only
};

/// Columns implied by the requested tests for m views, in request order.
std::vector<TestColumn> test_columns(const std::vector<TestRequest>& tests, int m);

struct TestCell {
  bool ok = false;
  std::string status = "ok";  // error code and message on failure, "gated" when skipped
  double statistic = 0.0;
  double scale = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  double p_adjusted = 1.0;
  std::optional<VarianceComponents> null_theta;
};

struct ScreenRow {
  std::uint64_t tuple_index = 0;
  std::vector<int> units;
  std::vector<TestCell> cells;  // one per column
  bool failed = false;          // every test failed
};

struct ScreenReport {
  std::vector<std::string> view_names;
  std::vector<std::vector<std::string>> unit_ids;
  std::vector<TestColumn> columns;
  std::vector<ScreenRow> rows;  // sorted by composite p (first composite column), then index
  std::uint64_t tuple_count = 0;
  std::uint64_t failed_tuples = 0;
  std::size_t subjects = 0;
  std::vector<std::string> dropped_subjects;
  double load_seconds = 0.0;
  double gram_seconds = 0.0;
  double test_seconds = 0.0;
};

/// Loads the data, runs every requested test on every tuple and applies BH per column.
ScreenReport run_screen(const RunConfig& cfg);

/// Same, on already loaded data.
ScreenReport run_screen(const RunConfig& cfg, const LoadedData& loaded);

std::string results_tsv(const ScreenReport& report);
std::string plotdata_tsv(const ScreenReport& report);
nlohmann::json manifest_json(const RunConfig& cfg, const ScreenReport& report);

/// Writes results.tsv, plotdata.tsv and manifest.json into `dir` (created if needed).
void write_screen_outputs(const RunConfig& cfg, const ScreenReport& report, const std::filesystem::path& dir);

}  // namespace mvkm
