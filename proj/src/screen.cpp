#include "mvkm/screen.hpp"

#include "mvkm/csv.hpp"
#include "mvkm/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

namespace mvkm {

using nlohmann::json;

namespace {

[[noreturn]] void config_fail(const std::string& msg) { throw Error(ErrorCode::config_error, msg); }

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) config_fail(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.contains(key)) config_fail("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_as(const json& obj, const std::string& key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_fail(where + "." + key + " is missing or has the wrong type");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal();
}

KernelSpec parse_kernel(const json& k, ViewKind kind, const std::string& where) {
  if (k.is_string()) {
    json obj = {{"type", k}};
    return parse_kernel(obj, kind, where);
  }
  reject_unknown(k, {"type", "bandwidth", "offset", "degree", "standardize"}, where);
  const auto type = get_as<std::string>(k, "type", where);
  KernelSpec spec;
  if (type == "linear") spec = KernelSpec::linear();
  else if (type == "polynomial") spec = KernelSpec::polynomial(k.value("offset", 1.0), k.value("degree", 2));
  else if (type == "gaussian") spec = KernelSpec::gaussian();
  else if (type == "ibs") spec = KernelSpec::ibs();
  else if (type == "default") spec = KernelSpec::default_for(kind);
  else config_fail(where + ".type '" + type + "' is not linear, polynomial, gaussian, ibs or default");
  if (k.contains("bandwidth")) {
    if (spec.kind != KernelKind::gaussian) config_fail(where + ".bandwidth applies to gaussian kernels only");
    const double bw = get_as<double>(k, "bandwidth", where);
    if (!(bw > 0.0)) config_fail(where + ".bandwidth must be positive");
    spec.bandwidth = bw;
  }
  if (spec.kind == KernelKind::polynomial && (spec.poly_degree < 1 || spec.poly_offset < 0.0)) {
    config_fail(where + " needs degree >= 1 and offset >= 0");
  }
  spec.standardize = k.value("standardize", false);
  if (spec.standardize && spec.kind == KernelKind::ibs) config_fail(where + ": ibs cannot be standardized");
  return spec;
}

json kernel_json(const KernelSpec& k) {
  json out;
  switch (k.kind) {
    case KernelKind::linear: out["type"] = "linear"; break;
    case KernelKind::polynomial:
      out["type"] = "polynomial";
      out["offset"] = k.poly_offset;
      out["degree"] = k.poly_degree;
      break;
    case KernelKind::gaussian:
      out["type"] = "gaussian";
      if (k.bandwidth) out["bandwidth"] = *k.bandwidth;
      break;
    case KernelKind::ibs: out["type"] = "ibs"; break;
  }
  out["standardize"] = k.standardize;
  return out;
}

TestKind parse_test_kind(const std::string& s, const std::string& where) {
  for (TestKind k : {TestKind::overall, TestKind::marginal, TestKind::interaction, TestKind::composite}) {
    if (to_string(k) == s) return k;
  }
  config_fail(where + ".kind '" + s + "' is not overall, marginal, interaction or composite");
}


}  // namespace

void RunConfig::validate() const {
  if (schema_version != 1) config_fail("schema_version must be 1");
  if (views.empty()) config_fail("at least one view is required");
  if (views.size() > 16) config_fail("at most 16 views are supported");
  if (tests.empty()) config_fail("at least one test must be requested");
  if (!(alpha > 0.0 && alpha < 1.0)) config_fail("alpha must lie in (0, 1)");
  if (workers < 1) config_fail("workers must be at least 1");
  if (max_tuples < 1) config_fail("max_tuples must be at least 1");
  const int m = static_cast<int>(views.size());
  for (const auto& t : tests) {
    if (t.kind == TestKind::interaction && (t.order < 2 || t.order > m)) {
      config_fail("interaction order must lie in [2, " + std::to_string(m) + "]");
    }
    if (t.kind == TestKind::composite && (t.order < 0 || t.order == 1 || t.order > m || m < 2)) {
      config_fail("composite order must lie in [2, " + std::to_string(m) + "]");
    }
  }
  if (gate_composite_on_overall &&
      std::none_of(tests.begin(), tests.end(), [](const TestRequest& t) { return t.kind == TestKind::overall; })) {
    config_fail("gate_composite_on_overall needs an overall test");
  }
}

RemlOptions parse_reml_options(const json& r) {
  reject_unknown(r, {"start_grid", "moment_start", "tolerance", "max_iterations", "information"}, "reml");
  RemlOptions opt;
  if (r.contains("start_grid")) opt.start_grid = get_as<std::vector<double>>(r, "start_grid", "reml");
  if (r.contains("moment_start")) opt.moment_start = get_as<bool>(r, "moment_start", "reml");
  if (r.contains("tolerance")) opt.tolerance = get_as<double>(r, "tolerance", "reml");
  if (r.contains("max_iterations")) opt.max_iterations = get_as<int>(r, "max_iterations", "reml");
  if (r.contains("information")) {
    const auto info = get_as<std::string>(r, "information", "reml");
    if (info == "expected") opt.information = InformationKind::expected;
    else if (info == "average") opt.information = InformationKind::average;
    else config_fail("reml.information must be expected or average");
  }
  for (double s : opt.start_grid) {
    if (!(s > 0.0 && s < 1.0)) config_fail("reml.start_grid values must lie in (0, 1)");
  }
  if (!(opt.tolerance > 0.0) || opt.max_iterations < 1) config_fail("invalid reml settings");
  return opt;
}

json to_json(const RemlOptions& opt) {
  return {{"start_grid", opt.start_grid},
          {"moment_start", opt.moment_start},
          {"tolerance", opt.tolerance},
          {"max_iterations", opt.max_iterations},
          {"information", opt.information == InformationKind::expected ? "expected" : "average"}};
}

RunConfig parse_run_config(const json& doc, const std::filesystem::path& base_dir) {
  reject_unknown(doc, {"schema_version", "views", "covariates", "phenotype", "tests", "alpha", "adjust",
                       "output_dir", "workers", "seed", "max_tuples", "gate_composite_on_overall", "reml",
                       "composite_variance"},
                 "config");
  RunConfig cfg;
  if (!doc.contains("schema_version")) config_fail("schema_version is required");
  cfg.schema_version = get_as<int>(doc, "schema_version", "config");
  if (!doc.contains("views") || !doc["views"].is_array()) config_fail("views must be an array");
  for (std::size_t i = 0; i < doc["views"].size(); ++i) {
    const json& v = doc["views"][i];
    const std::string where = "views[" + std::to_string(i) + "]";
    reject_unknown(v, {"name", "file", "kind", "kernel", "groups", "group_delimiter"}, where);
    ViewConfig vc;
    vc.name = v.contains("name") ? get_as<std::string>(v, "name", where) : "view" + std::to_string(i + 1);
    vc.file = resolve(base_dir, get_as<std::string>(v, "file", where));
    const std::string kind = v.value("kind", std::string("numeric"));
    if (kind == "numeric") vc.kind = ViewKind::numeric;
    else if (kind == "genotype") vc.kind = ViewKind::genotype;
    else config_fail(where + ".kind must be numeric or genotype");
    vc.kernel = v.contains("kernel") ? parse_kernel(v["kernel"], vc.kind, where + ".kernel")
                                     : KernelSpec::default_for(vc.kind);
    if (v.contains("groups")) vc.groups = resolve(base_dir, get_as<std::string>(v, "groups", where));
    if (v.contains("group_delimiter")) {
      vc.group_delimiter = get_as<std::string>(v, "group_delimiter", where);
      if (vc.group_delimiter->empty()) config_fail(where + ".group_delimiter must not be empty");
    }
    if (vc.groups && vc.group_delimiter) config_fail(where + ": give groups or group_delimiter, not both");
    cfg.views.push_back(std::move(vc));
  }
  if (doc.contains("covariates")) cfg.covariates = resolve(base_dir, get_as<std::string>(doc, "covariates", "config"));
  if (!doc.contains("phenotype")) config_fail("phenotype is required");
  const json& ph = doc["phenotype"];
  reject_unknown(ph, {"file", "column", "family"}, "phenotype");
  cfg.phenotype = resolve(base_dir, get_as<std::string>(ph, "file", "phenotype"));
  if (ph.contains("column")) cfg.phenotype_column = get_as<std::string>(ph, "column", "phenotype");
  try {
    cfg.family = parse_family(ph.value("family", std::string("binomial"))).kind;
  } catch (const Error& e) {
    config_fail("phenotype.family: " + e.detail());
  }
  if (!doc.contains("tests") || !doc["tests"].is_array()) config_fail("tests must be an array");
  for (std::size_t i = 0; i < doc["tests"].size(); ++i) {
    const json& t = doc["tests"][i];
    const std::string where = "tests[" + std::to_string(i) + "]";
    TestRequest req;
    if (t.is_string()) {
      req.kind = parse_test_kind(t.get<std::string>(), where);
    } else {
      reject_unknown(t, {"kind", "order"}, where);
      req.kind = parse_test_kind(get_as<std::string>(t, "kind", where), where);
      if (t.contains("order")) req.order = get_as<int>(t, "order", where);
    }
    if (req.kind == TestKind::interaction && req.order == 0) req.order = 2;
    cfg.tests.push_back(req);
  }
  if (doc.contains("alpha")) cfg.alpha = get_as<double>(doc, "alpha", "config");
  if (doc.contains("adjust")) cfg.adjust = get_as<bool>(doc, "adjust", "config");
  if (doc.contains("output_dir")) cfg.output_dir = resolve(base_dir, get_as<std::string>(doc, "output_dir", "config"));
  if (doc.contains("workers")) cfg.workers = get_as<int>(doc, "workers", "config");
  if (doc.contains("seed")) cfg.seed = get_as<std::uint64_t>(doc, "seed", "config");
  if (doc.contains("max_tuples")) cfg.max_tuples = get_as<std::uint64_t>(doc, "max_tuples", "config");
  if (doc.contains("gate_composite_on_overall")) {
    cfg.gate_composite_on_overall = get_as<bool>(doc, "gate_composite_on_overall", "config");
  }
  if (doc.contains("reml")) cfg.reml = parse_reml_options(doc["reml"]);
  if (doc.contains("composite_variance")) {
    cfg.composite_variance = parse_composite_variance(get_as<std::string>(doc, "composite_variance", "config"));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) config_fail("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    config_fail("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(doc, path.parent_path());
}

json to_json(const RunConfig& cfg) {
  json out;
  out["schema_version"] = cfg.schema_version;
  out["views"] = json::array();
  for (const auto& v : cfg.views) {
    json jv = {{"name", v.name},
               {"file", v.file.string()},
               {"kind", v.kind == ViewKind::genotype ? "genotype" : "numeric"},
               {"kernel", kernel_json(v.kernel)}};
    if (v.groups) jv["groups"] = v.groups->string();
    if (v.group_delimiter) jv["group_delimiter"] = *v.group_delimiter;
    out["views"].push_back(jv);
  }
  if (cfg.covariates) out["covariates"] = cfg.covariates->string();
  out["phenotype"] = {{"file", cfg.phenotype.string()}, {"family", family_name(cfg.family)}};
  if (cfg.phenotype_column) out["phenotype"]["column"] = *cfg.phenotype_column;
  out["tests"] = json::array();
  for (const auto& t : cfg.tests) out["tests"].push_back({{"kind", to_string(t.kind)}, {"order", t.order}});
  out["alpha"] = cfg.alpha;
  out["adjust"] = cfg.adjust;
  out["output_dir"] = cfg.output_dir.string();
  out["workers"] = cfg.workers;
  out["seed"] = cfg.seed;
  out["max_tuples"] = cfg.max_tuples;
  out["gate_composite_on_overall"] = cfg.gate_composite_on_overall;
  out["reml"] = to_json(cfg.reml);
  out["composite_variance"] = to_string(cfg.composite_variance);
  return out;
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

UnitIndex group_features(const ViewConfig& view, const std::vector<std::string>& features) {
  std::vector<std::string> unit_of(features.size());
  if (view.groups) {
    const CsvText map = read_csv_text(*view.groups);
    std::unordered_map<std::string, std::string> lookup;
    for (const auto& row : map.rows) {
      if (!lookup.emplace(row[0], row[1]).second) {
        throw Error(ErrorCode::data_error, map.path + ": feature '" + row[0] + "' is listed twice");
      }
    }
    for (std::size_t j = 0; j < features.size(); ++j) {
      const auto it = lookup.find(features[j]);
      if (it == lookup.end()) {
        throw Error(ErrorCode::data_error, map.path + ": no unit for feature '" + features[j] + "' of view " + view.name);
      }
      unit_of[j] = it->second;
    }
  } else if (view.group_delimiter) {
    for (std::size_t j = 0; j < features.size(); ++j) {
      const auto pos = features[j].find(*view.group_delimiter);
      unit_of[j] = pos == std::string::npos ? features[j] : features[j].substr(0, pos);
    }
  } else {
    std::fill(unit_of.begin(), unit_of.end(), view.name);
  }
  UnitIndex index;
  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t j = 0; j < features.size(); ++j) {
    auto [it, inserted] = slot.emplace(unit_of[j], index.unit_ids.size());
    if (inserted) {
      index.unit_ids.push_back(unit_of[j]);
      index.columns.emplace_back();
    }
    index.columns[it->second].push_back(static_cast<Eigen::Index>(j));
  }
  return index;
}

}  // namespace

LoadedData load_dataset(const RunConfig& cfg) {
  cfg.validate();
  std::vector<NumericTable> tables;
  for (const auto& v : cfg.views) {
    tables.push_back(read_numeric_csv(v.file));
    if (v.kind == ViewKind::genotype) validate_genotype_table(tables.back());
  }
  const NumericTable pheno = read_numeric_csv(cfg.phenotype);
  Eigen::Index pheno_col = 0;
  if (cfg.phenotype_column) {
    const auto it = std::find(pheno.columns.begin(), pheno.columns.end(), *cfg.phenotype_column);
    if (it == pheno.columns.end()) {
      throw Error(ErrorCode::data_error, pheno.path + " has no column '" + *cfg.phenotype_column + "'");
    }
    pheno_col = it - pheno.columns.begin();
  }
  std::optional<NumericTable> cov;
  if (cfg.covariates) cov = read_numeric_csv(*cfg.covariates);

  std::vector<const NumericTable*> all{&pheno};
  for (const auto& t : tables) all.push_back(&t);
  if (cov) all.push_back(&*cov);
  std::vector<std::unordered_map<std::string, Eigen::Index>> row_of(all.size());
  std::set<std::string> every_id;
  for (std::size_t f = 0; f < all.size(); ++f) {
    for (std::size_t r = 0; r < all[f]->ids.size(); ++r) {
      row_of[f].emplace(all[f]->ids[r], static_cast<Eigen::Index>(r));
      every_id.insert(all[f]->ids[r]);
    }
  }
  std::vector<std::string> common;
  for (const auto& id : pheno.ids) {
    bool everywhere = true;
    for (std::size_t f = 1; f < all.size() && everywhere; ++f) everywhere = row_of[f].contains(id);
    if (everywhere) common.push_back(id);
  }
  if (common.empty()) throw Error(ErrorCode::data_error, "no subject id is common to every input file");
  const std::set<std::string> common_set(common.begin(), common.end());

  LoadedData out;
  for (const auto& id : every_id) {
    if (!common_set.contains(id)) out.dropped_subjects.push_back(id);
  }
  const auto n = static_cast<Eigen::Index>(common.size());
  out.data.subject_ids = common;
  out.data.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) out.data.y[i] = pheno.values(row_of[0].at(common[i]), pheno_col);
  const Eigen::Index q = 1 + (cov ? cov->values.cols() : 0);
  out.data.covariates.resize(n, q);
  out.data.covariates.col(0).setOnes();
  if (cov) {
    for (Eigen::Index i = 0; i < n; ++i) {
      out.data.covariates.row(i).tail(q - 1) = cov->values.row(row_of.back().at(common[i]));
    }
  }
  for (std::size_t v = 0; v < tables.size(); ++v) {
    ViewMatrix view;
    view.kind = cfg.views[v].kind;
    view.view_id = static_cast<int>(v);
    view.data.resize(n, tables[v].values.cols());
    for (Eigen::Index i = 0; i < n; ++i) view.data.row(i) = tables[v].values.row(row_of[v + 1].at(common[i]));
    out.data.views.push_back(std::move(view));
    out.view_names.push_back(cfg.views[v].name);
    out.units.push_back(group_features(cfg.views[v], tables[v].columns));
  }
  return out;
}

std::uint64_t tuple_count(const std::vector<std::size_t>& unit_counts) {
  std::uint64_t total = 1;
  for (std::size_t c : unit_counts) {
    if (c == 0) return 0;
    if (total > std::numeric_limits<std::uint64_t>::max() / c) return std::numeric_limits<std::uint64_t>::max();
    total *= c;
  }
  return total;
}

TupleSpace::TupleSpace(std::vector<std::size_t> unit_counts)
    : counts_(std::move(unit_counts)), size_(tuple_count(counts_)) {}

std::vector<int> TupleSpace::at(std::uint64_t index) const {
  if (index >= size_) throw Error(ErrorCode::invalid_parameter, "tuple index out of range");
  std::vector<int> units(counts_.size());
  for (std::size_t v = counts_.size(); v-- > 0;) {
    units[v] = static_cast<int>(index % counts_[v]);
    index /= counts_[v];
  }
  return units;
}

TupleSpace enumerate_tuples(const std::vector<std::size_t>& unit_counts, std::uint64_t cap) {
  if (unit_counts.empty()) throw Error(ErrorCode::insufficient_data, "no views to combine");
  for (std::size_t v = 0; v < unit_counts.size(); ++v) {
    if (unit_counts[v] == 0) {
      throw Error(ErrorCode::insufficient_data, "view " + std::to_string(v + 1) + " has no testing units");
    }
  }
  TupleSpace space(unit_counts);
  if (space.size() > cap) {
    throw Error(ErrorCode::tuple_cap_exceeded, std::to_string(space.size()) + " tuples exceed the cap of " +
                                                   std::to_string(cap) + " (raise --max-tuples to run them)");
  }
  return space;
}

std::vector<TestColumn> test_columns(const std::vector<TestRequest>& tests, int m) {
  std::vector<TestColumn> cols;
  const auto terms = all_terms(m, m);
  for (const auto& t : tests) {
    switch (t.kind) {
      case TestKind::overall: cols.push_back({TestKind::overall, {}, "overall", {}}); break;
      case TestKind::marginal:
        for (int v = 0; v < m; ++v) {
          EffectTerm term{v};
          cols.push_back({TestKind::marginal, term, "marginal_" + term.label(), {}});
        }
        break;
      case TestKind::interaction:
        for (const auto& term : terms) {
          if (static_cast<int>(term.order()) == t.order) {
            cols.push_back({TestKind::interaction, term, "interaction_" + term.label(), {}});
          }
        }
        break;
      case TestKind::composite: {
        const int order = t.order == 0 ? m : t.order;
        for (const auto& term : terms) {
          if (static_cast<int>(term.order()) != order) continue;
          TestColumn col{TestKind::composite, term, "composite_" + term.label(), {}};
          for (const auto& other : terms) {
            if (other.order() < term.order()) col.null_terms.push_back(other);
          }
          cols.push_back(std::move(col));
        }
        break;
      }
    }
  }
  return cols;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

TestCell run_cell(const TestColumn& col, const MultiViewDataset& data, const KernelFamily& family,
                  const Family& response, const std::optional<ScoreTestNull>& null, const RunConfig& cfg) {
  TestCell cell;
  try {
    TestResult r;
    switch (col.kind) {
      case TestKind::overall: r = null->test(family.sum(), TestKind::overall); break;
      case TestKind::marginal:
      case TestKind::interaction: r = null->test(family.gram(col.term), col.kind, col.term); break;
      case TestKind::composite:
        r = composite_test(data.y, data.covariates, family, col.term, response, col.null_terms, cfg.reml,
                           cfg.composite_variance);
        break;
    }
    cell.ok = true;
    cell.statistic = r.statistic;
    cell.scale = r.scale;
    cell.df = r.df;
    cell.p_value = r.p_value;
    cell.null_theta = r.null_theta;
  } catch (const RemlNoConvergence& e) {
    cell.status = e.what();
    cell.null_theta = e.best_iterate().theta;
  } catch (const std::exception& e) {
    cell.status = e.what();
  }
  return cell;
}

std::string tidy(std::string s) {
  for (char& c : s) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

std::string num(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

ScreenReport run_screen(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedData loaded = load_dataset(cfg);
  const double load = seconds_since(t0);
  ScreenReport report = run_screen(cfg, loaded);
  report.load_seconds = load;
  return report;
}

ScreenReport run_screen(const RunConfig& cfg, const LoadedData& loaded) {
  cfg.validate();
  const auto& data = loaded.data;
  const int m = static_cast<int>(data.views.size());
  std::vector<std::size_t> counts;
  for (const auto& u : loaded.units) counts.push_back(u.unit_ids.size());
  const TupleSpace space = enumerate_tuples(counts, cfg.max_tuples);
  const Family response{cfg.family, std::nullopt};
  if (data.covariates.cols() >= data.subjects()) {
    throw Error(ErrorCode::data_error, "more covariates than subjects");
  }

  ScreenReport report;
  report.view_names = loaded.view_names;
  for (const auto& u : loaded.units) report.unit_ids.push_back(u.unit_ids);
  report.columns = test_columns(cfg.tests, m);
  report.tuple_count = space.size();
  report.subjects = static_cast<std::size_t>(data.subjects());
  report.dropped_subjects = loaded.dropped_subjects;

  // Read-only Gram cache for every (view, unit), built before the parallel phase.
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<MatrixXd>> grams(static_cast<std::size_t>(m));
  std::vector<std::vector<std::string>> gram_errors(static_cast<std::size_t>(m));
  std::vector<std::pair<int, int>> jobs;
  for (int v = 0; v < m; ++v) {
    grams[v].resize(counts[v]);
    gram_errors[v].resize(counts[v]);
    for (std::size_t u = 0; u < counts[v]; ++u) jobs.emplace_back(v, static_cast<int>(u));
  }
  parallel_for(jobs.size(), cfg.workers, [&](std::size_t j) {
    const auto [v, u] = jobs[j];
    const auto& cols = loaded.units[v].columns[u];
    ViewMatrix unit{MatrixXd(data.subjects(), static_cast<Eigen::Index>(cols.size())), data.views[v].kind, v};
    for (std::size_t c = 0; c < cols.size(); ++c) unit.data.col(static_cast<Eigen::Index>(c)) = data.views[v].data.col(cols[c]);
    try {
      grams[v][u] = view_gram(unit, cfg.views[v].kernel);
    } catch (const std::exception& e) {
      gram_errors[v][u] = e.what();
    }
  });
  report.gram_seconds = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  bool need_null = false;
  int max_order = 1;
  for (const auto& c : report.columns) {
    need_null = need_null || c.kind != TestKind::composite;
    max_order = std::max(max_order, c.kind == TestKind::overall ? m : static_cast<int>(c.term.order()));
  }
  std::optional<ScoreTestNull> shared_null;
  std::string null_error;
  if (need_null) {
    try {
      shared_null.emplace(data.y, data.covariates, response);
    } catch (const std::exception& e) {
      null_error = e.what();
    }
  }
  std::size_t overall_col = report.columns.size();
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    if (report.columns[c].kind == TestKind::overall) {
      overall_col = c;
      break;
    }
  }

  report.rows.resize(space.size());
  parallel_for(report.rows.size(), cfg.workers, [&](std::size_t i) {
    ScreenRow& row = report.rows[i];
    row.tuple_index = i;
    row.units = space.at(i);
    row.cells.assign(report.columns.size(), TestCell{});
    std::string fail;
    for (int v = 0; v < m && fail.empty(); ++v) fail = gram_errors[v][row.units[v]];
    KernelFamily family(data.subjects());
    if (fail.empty()) {
      for (int v = 0; v < m; ++v) family.insert(EffectTerm{v}, grams[v][row.units[v]]);
      for (const auto& term : all_terms(m, max_order)) {
        if (term.order() > 1) family.insert(term, interaction_gram(family, term));
      }
    }
    for (std::size_t c = 0; c < report.columns.size(); ++c) {
      const auto& col = report.columns[c];
      TestCell& cell = row.cells[c];
      if (!fail.empty()) {
        cell.status = fail;
        continue;
      }
      if (col.kind != TestKind::composite && !shared_null) {
        cell.status = null_error;
        continue;
      }
      if (col.kind == TestKind::composite && cfg.gate_composite_on_overall && overall_col < c) {
        const TestCell& gate = row.cells[overall_col];
        if (!gate.ok || gate.p_value > cfg.alpha) {
          cell.status = "gated";
          continue;
        }
      }
      cell = run_cell(col, data, family, response, shared_null, cfg);
    }
    row.failed = std::none_of(row.cells.begin(), row.cells.end(), [](const TestCell& c) { return c.ok; }) &&
                 std::any_of(row.cells.begin(), row.cells.end(), [](const TestCell& c) { return c.status != "gated"; });
  });
  report.test_seconds = seconds_since(t0);

  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    std::vector<double> p;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
      const TestCell& cell = report.rows[i].cells[c];
      if (cell.ok) {
        p.push_back(cell.p_value);
        where.push_back(i);
      }
    }
    const std::vector<double> adj = cfg.adjust ? bh_adjust(p) : p;
    for (std::size_t k = 0; k < where.size(); ++k) report.rows[where[k]].cells[c].p_adjusted = adj[k];
  }
  for (const auto& row : report.rows) report.failed_tuples += row.failed ? 1 : 0;

  std::size_t sort_col = report.columns.size();
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    if (report.columns[c].kind == TestKind::composite) {
      sort_col = c;
      break;
    }
  }
  if (sort_col == report.columns.size() && !report.columns.empty()) sort_col = 0;
  if (sort_col < report.columns.size()) {
    auto key = [&](const ScreenRow& r) {
      const TestCell& cell = r.cells[sort_col];
      return cell.ok ? cell.p_value : std::numeric_limits<double>::infinity();
    };
    std::stable_sort(report.rows.begin(), report.rows.end(), [&](const ScreenRow& a, const ScreenRow& b) {
      const double ka = key(a), kb = key(b);
      if (ka != kb) return ka < kb;
      return a.tuple_index < b.tuple_index;
    });
  }
  return report;
}

std::string results_tsv(const ScreenReport& report) {
  std::ostringstream out;
  out << "tuple_index";
  for (const auto& name : report.view_names) out << '\t' << name;
  for (const auto& col : report.columns) {
    for (const char* f : {"S", "gamma", "nu", "p", "p_adj"}) out << '\t' << col.label << '_' << f;
    if (col.kind == TestKind::composite) {
      out << '\t' << col.label << "_sigma2";
      for (const auto& t : col.null_terms) out << '\t' << col.label << "_tau_" << t.label();
    }
  }
  out << "\tstatus\n";
  for (const auto& row : report.rows) {
    out << row.tuple_index;
    for (std::size_t v = 0; v < row.units.size(); ++v) out << '\t' << report.unit_ids[v][row.units[v]];
    std::string status;
    for (std::size_t c = 0; c < report.columns.size(); ++c) {
      const auto& col = report.columns[c];
      const TestCell& cell = row.cells[c];
      const double nan = std::numeric_limits<double>::quiet_NaN();
      out << '\t' << num(cell.ok ? cell.statistic : nan) << '\t' << num(cell.ok ? cell.scale : nan) << '\t'
          << num(cell.ok ? cell.df : nan) << '\t' << num(cell.ok ? cell.p_value : nan) << '\t'
          << num(cell.ok ? cell.p_adjusted : nan);
      if (col.kind == TestKind::composite) {
        const bool have = cell.null_theta.has_value();
        out << '\t' << num(have ? cell.null_theta->sigma2 : nan);
        for (const auto& t : col.null_terms) out << '\t' << num(have ? cell.null_theta->tau(t) : nan);
      }
      if (!cell.ok) {
        if (!status.empty()) status += "; ";
        status += col.label + " " + tidy(cell.status);
      }
    }
    out << '\t' << (status.empty() ? "ok" : status) << '\n';
  }
  return out.str();
}

std::string plotdata_tsv(const ScreenReport& report) {
  std::vector<const ScreenRow*> by_index(report.rows.size());
  for (const auto& row : report.rows) by_index[row.tuple_index] = &row;
  std::ostringstream out;
  out << "tuple_index";
  for (const auto& col : report.columns) out << '\t' << col.label << "_neglog10p";
  out << '\n';
  for (const ScreenRow* row : by_index) {
    out << row->tuple_index;
    for (const auto& cell : row->cells) {
      out << '\t' << (cell.ok ? num(-std::log10(std::max(cell.p_value, 1e-300))) : "NA");
    }
    out << '\n';
  }
  return out.str();
}

json manifest_json(const RunConfig& cfg, const ScreenReport& report) {
  const json canonical = to_json(cfg);
  std::uint64_t significant = 0;
  json columns = json::array();
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    std::uint64_t sig = 0, failed = 0;
    for (const auto& row : report.rows) {
      const TestCell& cell = row.cells[c];
      if (!cell.ok) ++failed;
      else if (cell.p_adjusted <= cfg.alpha) ++sig;
    }
    significant += sig;
    columns.push_back({{"label", report.columns[c].label}, {"significant", sig}, {"failed", failed}});
  }
  json out;
  out["tool"] = "mvkm";
  json hashed = canonical;
  hashed.erase("workers");
  out["config_hash"] = fnv1a_hex(hashed.dump());
  out["config"] = canonical;
  out["seed"] = cfg.seed;
  out["workers"] = cfg.workers;
  out["alpha"] = cfg.alpha;
  out["subjects"] = report.subjects;
  out["dropped_subjects"] = report.dropped_subjects;
  out["views"] = report.view_names;
  json units = json::array();
  for (const auto& u : report.unit_ids) units.push_back(u.size());
  out["units_per_view"] = units;
  out["tuples"] = report.tuple_count;
  out["failed_tuples"] = report.failed_tuples;
  out["tests"] = columns;
  out["timings_seconds"] = {{"load", report.load_seconds},
                            {"grams", report.gram_seconds},
                            {"tests", report.test_seconds}};
  return out;
}

void write_screen_outputs(const RunConfig& cfg, const ScreenReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw Error(ErrorCode::io_error, "cannot write " + (dir / name).string());
    f << text;
  };
  write("results.tsv", results_tsv(report));
  write("plotdata.tsv", plotdata_tsv(report));
  write("manifest.json", manifest_json(cfg, report).dump(2) + "\n");
}

}  // namespace mvkm
