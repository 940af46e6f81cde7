#include "mvkm/screen.hpp"
#include "mvkm/study.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

using nlohmann::json;

enum Exit { ok = 0, failure = 1, config = 2, data = 3, all_failed = 4 };

struct Overrides {
  std::string config;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  double alpha = 0.05;
  std::optional<std::uint64_t> max_tuples;
};

int exit_code(const mvkm::Error& e) {
  switch (e.code()) {
    case mvkm::ErrorCode::config_error:
    case mvkm::ErrorCode::tuple_cap_exceeded:
    case mvkm::ErrorCode::invalid_parameter:
      return config;
    case mvkm::ErrorCode::data_error:
    case mvkm::ErrorCode::invalid_genotype:
    case mvkm::ErrorCode::insufficient_data:
    case mvkm::ErrorCode::io_error:
    case mvkm::ErrorCode::dimension_mismatch:
      return data;
    default:
      return failure;
  }
}

void write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw mvkm::Error(mvkm::ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());
  std::ofstream f(dir / name, std::ios::binary);
  if (!f) throw mvkm::Error(mvkm::ErrorCode::io_error, "cannot write " + (dir / name).string());
  f << text;
}

mvkm::RunConfig screen_config(const Overrides& o) {
  mvkm::RunConfig cfg = mvkm::load_run_config(o.config);
  if (o.workers) cfg.workers = *o.workers;
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.output_dir = *o.out;
  cfg.alpha = o.alpha;
  if (o.max_tuples) cfg.max_tuples = *o.max_tuples;
  cfg.validate();
  return cfg;
}

int run_test(const Overrides& o) {
  const mvkm::RunConfig cfg = screen_config(o);
  const mvkm::ScreenReport report = mvkm::run_screen(cfg);
  mvkm::write_screen_outputs(cfg, report, cfg.output_dir);
  std::printf("%llu tuples, %llu failed, %zu subjects (%zu dropped); outputs in %s\n",
              static_cast<unsigned long long>(report.tuple_count),
              static_cast<unsigned long long>(report.failed_tuples), report.subjects,
              report.dropped_subjects.size(), cfg.output_dir.string().c_str());
  if (report.tuple_count > 0 && report.failed_tuples == report.tuple_count) {
    std::fprintf(stderr, "error: every tuple failed\n");
    return all_failed;
  }
  return ok;
}

int run_validate(const Overrides& o) {
  const mvkm::RunConfig cfg = screen_config(o);
  const mvkm::LoadedData loaded = mvkm::load_dataset(cfg);
  std::vector<std::size_t> counts;
  for (const auto& u : loaded.units) counts.push_back(u.unit_ids.size());
  const mvkm::TupleSpace space = mvkm::enumerate_tuples(counts, cfg.max_tuples);
  const auto columns = mvkm::test_columns(cfg.tests, static_cast<int>(cfg.views.size()));
  std::printf("config ok (hash %s)\n", mvkm::fnv1a_hex(mvkm::to_json(cfg).dump()).c_str());
  std::printf("subjects: %lld common, %zu dropped\n", static_cast<long long>(loaded.data.subjects()),
              loaded.dropped_subjects.size());
  for (std::size_t v = 0; v < counts.size(); ++v) {
    std::printf("view %s: %lld features in %zu units\n", loaded.view_names[v].c_str(),
                static_cast<long long>(loaded.data.views[v].features()), counts[v]);
  }
  std::printf("tuples: %llu; test columns per tuple: %zu\n", static_cast<unsigned long long>(space.size()),
              columns.size());
  return ok;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json study_manifest(const json& canonical, double seconds) {
  json hashed = canonical;
  hashed.erase("workers");
  return {{"tool", "mvkm"},
          {"config_hash", mvkm::fnv1a_hex(hashed.dump())},
          {"config", canonical},
          {"timings_seconds", {{"total", seconds}}}};
}

int run_simulate(const Overrides& o) {
  const std::filesystem::path path(o.config);
  mvkm::PowerStudyConfig cfg = mvkm::parse_power_study(mvkm::read_json_file(path), path.parent_path());
  if (o.workers) cfg.workers = *o.workers;
  if (o.seed) {
    cfg.seed = *o.seed;
    for (auto& c : cfg.grid) c.seed = *o.seed;
  }
  if (o.out) cfg.output_dir = *o.out;
  cfg.alpha = o.alpha;
  if (cfg.workers < 1) throw mvkm::Error(mvkm::ErrorCode::config_error, "workers must be at least 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = mvkm::power_study(cfg.grid, cfg.methods, cfg.alpha, cfg.workers, cfg.options);
  const double secs = seconds_since(t0);

  std::string plot = "setting\tmethod\tn\trejection_rate\tci_low\tci_high\n";
  std::size_t setting = 0;
  bool any_ok = false;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (r > 0 && r % cfg.methods.size() == 0) ++setting;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu\t%s\t%d\t%.10g\t%.10g\t%.10g\n", setting,
                  std::string(mvkm::to_string(rows[r].method)).c_str(), rows[r].n, rows[r].rejection_rate,
                  rows[r].ci_low, rows[r].ci_high);
    plot += buf;
    any_ok = any_ok || rows[r].failures < rows[r].replicates;
  }
  json canonical = {{"command", "simulate"},
                    {"alpha", cfg.alpha},
                    {"workers", cfg.workers},
                    {"seed", cfg.seed},
                    {"options", mvkm::to_json(cfg.options)},
                    {"grid", json::array()},
                    {"methods", json::array()}};
  for (const auto& c : cfg.grid) canonical["grid"].push_back(mvkm::to_json(c));
  for (auto m : cfg.methods) canonical["methods"].push_back(mvkm::to_string(m));
  write_text(cfg.output_dir, "results.tsv", mvkm::power_table_tsv(rows));
  write_text(cfg.output_dir, "plotdata.tsv", plot);
  write_text(cfg.output_dir, "manifest.json", study_manifest(canonical, secs).dump(2) + "\n");
  std::printf("%zu settings x %zu methods; outputs in %s\n", cfg.grid.size(), cfg.methods.size(),
              cfg.output_dir.string().c_str());
  if (!any_ok) {
    std::fprintf(stderr, "error: every replicate failed\n");
    return all_failed;
  }
  return ok;
}

int run_roc(const Overrides& o) {
  const std::filesystem::path path(o.config);
  mvkm::RocStudyConfig cfg = mvkm::parse_roc_study(mvkm::read_json_file(path), path.parent_path());
  if (o.workers) cfg.workers = *o.workers;
  if (o.seed) cfg.roc.base.seed = *o.seed;
  if (o.out) cfg.output_dir = *o.out;
  if (cfg.workers < 1) throw mvkm::Error(mvkm::ErrorCode::config_error, "workers must be at least 1");
  const auto t0 = std::chrono::steady_clock::now();
  const auto curves = mvkm::roc_curve(cfg.roc, cfg.methods, cfg.workers, cfg.options);
  const double secs = seconds_since(t0);

  std::string summary = "method\tauc\tpositives\tnegatives\tfailures\n";
  bool any_ok = false;
  for (const auto& c : curves) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%.10g\t%d\t%d\t%d\n", std::string(mvkm::to_string(c.method)).c_str(),
                  c.auc, c.positives, c.negatives, c.failures);
    summary += buf;
    any_ok = any_ok || c.failures < c.positives + c.negatives;
  }
  json canonical = {{"command", "roc"},
                    {"workers", cfg.workers},
                    {"base", mvkm::to_json(cfg.roc.base)},
                    {"randomized_orders", cfg.roc.randomized_orders},
                    {"null_probability", cfg.roc.null_probability},
                    {"alpha_upper", cfg.roc.alpha_upper},
                    {"label_order", cfg.roc.label_order},
                    {"threshold_step", cfg.roc.threshold_step},
                    {"options", mvkm::to_json(cfg.options)},
                    {"methods", json::array()}};
  for (auto m : cfg.methods) canonical["methods"].push_back(mvkm::to_string(m));
  write_text(cfg.output_dir, "results.tsv", summary);
  write_text(cfg.output_dir, "plotdata.tsv", mvkm::roc_table_tsv(curves));
  write_text(cfg.output_dir, "manifest.json", study_manifest(canonical, secs).dump(2) + "\n");
  std::printf("%zu methods; outputs in %s\n", curves.size(), cfg.output_dir.string().c_str());
  if (!any_ok) {
    std::fprintf(stderr, "error: every replicate failed\n");
    return all_failed;
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel machine tests for marginal, interaction and composite effects in multi-view data"};
  app.require_subcommand(1);
  Overrides o;
  int workers = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::uint64_t max_tuples = 0;

  auto add_common = [&](CLI::App* sub, bool with_alpha, bool with_cap) {
    sub->add_option("--config", o.config, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--workers", workers, "worker threads")->check(CLI::Range(1, 256));
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out, "output directory");
    if (with_alpha) sub->add_option("--alpha", o.alpha, "nominal level")->default_val(0.05)->check(CLI::Range(0.0, 1.0));
    if (with_cap) sub->add_option("--max-tuples", max_tuples, "refuse runs with more tuples than this");
  };
  CLI::App* test = app.add_subcommand("test", "screen every tuple of testing units");
  CLI::App* simulate = app.add_subcommand("simulate", "power and false-positive study");
  CLI::App* roc = app.add_subcommand("roc", "ROC study under randomised effect sizes");
  CLI::App* validate = app.add_subcommand("validate", "check the config and data without testing");
  add_common(test, true, true);
  add_common(simulate, true, false);
  add_common(roc, false, false);
  add_common(validate, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config;
  }
  for (CLI::App* sub : {test, simulate, roc, validate}) {
    if (!sub->parsed()) continue;
    auto given = [&](const char* name) {
      const CLI::Option* opt = sub->get_option_no_throw(name);
      return opt != nullptr && opt->count() > 0;
    };
    if (given("--workers")) o.workers = workers;
    if (given("--seed")) o.seed = seed;
    if (given("--out")) o.out = out;
    if (given("--max-tuples")) o.max_tuples = max_tuples;
  }
  if (!(o.alpha > 0.0 && o.alpha < 1.0)) {
    std::fprintf(stderr, "error: --alpha must lie in (0, 1)\n");
    return config;
  }

  try {
    if (test->parsed()) return run_test(o);
    if (simulate->parsed()) return run_simulate(o);
    if (roc->parsed()) return run_roc(o);
    return run_validate(o);
  } catch (const mvkm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return failure;
  }
}
