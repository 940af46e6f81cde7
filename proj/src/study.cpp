#include "mvkm/study.hpp"

#include "mvkm/screen.hpp"

#include <fstream>
#include <set>

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
T get_as(const json& obj, const std::string& key) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_fail("config." + key + " is missing or has the wrong type");
  }
}

const std::set<std::string> kSimKeys{"schema_version", "n", "m", "alphas", "replicates", "noise_sd",
                                     "features_per_view", "covariate_dim", "beta", "genotype_views",
                                     "methods", "workers", "seed", "output_dir", "kernels", "reml",
                                     "composite_variance", "pca"};

SimConfig parse_sim_base(const json& doc) {
  SimConfig c;
  if (doc.contains("m")) c.m = get_as<int>(doc, "m");
  if (doc.contains("replicates")) c.replicates = get_as<int>(doc, "replicates");
  if (doc.contains("noise_sd")) c.noise_sd = get_as<double>(doc, "noise_sd");
  if (doc.contains("features_per_view")) c.features_per_view = get_as<int>(doc, "features_per_view");
  if (doc.contains("covariate_dim")) {
    c.covariate_dim = get_as<int>(doc, "covariate_dim");
    if (!doc.contains("beta")) c.beta.assign(static_cast<std::size_t>(std::max(c.covariate_dim, 0)), 0.5);
  }
  if (doc.contains("beta")) c.beta = get_as<std::vector<double>>(doc, "beta");
  if (doc.contains("genotype_views")) c.genotype_views = get_as<std::vector<int>>(doc, "genotype_views");
  if (doc.contains("seed")) c.seed = get_as<std::uint64_t>(doc, "seed");
  return c;
}

MethodOptions parse_options(const json& doc) {
  MethodOptions o;
  if (doc.contains("kernels")) o.kernels = parse_kernel_choice(get_as<std::string>(doc, "kernels"));
  if (doc.contains("reml")) o.reml = parse_reml_options(doc["reml"]);
  if (doc.contains("composite_variance")) {
    o.composite_variance = parse_composite_variance(get_as<std::string>(doc, "composite_variance"));
  }
  if (doc.contains("pca")) {
    const json& p = doc["pca"];
    reject_unknown(p, {"partial_variance", "max_components"}, "pca");
    if (p.contains("partial_variance")) o.pca_partial_variance = get_as<double>(p, "partial_variance");
    if (p.contains("max_components")) o.pca_max_components = get_as<int>(p, "max_components");
    if (!(o.pca_partial_variance > 0.0 && o.pca_partial_variance <= 1.0) || o.pca_max_components < 1) {
      config_fail("pca needs partial_variance in (0, 1] and max_components >= 1");
    }
  }
  return o;
}

std::vector<Method> parse_methods(const json& doc) {
  std::vector<Method> out;
  for (const auto& name : get_as<std::vector<std::string>>(doc, "methods")) out.push_back(parse_method(name));
  if (out.empty()) config_fail("methods must not be empty");
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal();
}

void check_version(const json& doc) {
  if (!doc.is_object()) config_fail("config must be a JSON object");
  if (!doc.contains("schema_version") || get_as<int>(doc, "schema_version") != 1) {
    config_fail("schema_version must be 1");
  }
}

void validate_sim(const SimConfig& c) {
  try {
    c.validate();
  } catch (const Error& e) {
    config_fail(e.detail());
  }
}

}  // namespace

PowerStudyConfig parse_power_study(const json& doc, const std::filesystem::path& base_dir) {
  check_version(doc);
  std::set<std::string> keys = kSimKeys;
  keys.insert("alpha");
  reject_unknown(doc, keys, "config");
  PowerStudyConfig cfg;
  const SimConfig base = parse_sim_base(doc);
  cfg.seed = base.seed;
  std::vector<int> ns{base.n};
  if (doc.contains("n")) {
    ns = doc["n"].is_array() ? get_as<std::vector<int>>(doc, "n") : std::vector<int>{get_as<int>(doc, "n")};
  }
  std::vector<std::vector<double>> alphas{{}};
  if (doc.contains("alphas")) {
    const json& a = doc["alphas"];
    if (a.is_array() && !a.empty() && a[0].is_array()) alphas = get_as<std::vector<std::vector<double>>>(doc, "alphas");
    else alphas = {get_as<std::vector<double>>(doc, "alphas")};
  }
  if (ns.empty() || alphas.empty()) config_fail("n and alphas must not be empty");
  for (int n : ns) {
    for (const auto& a : alphas) {
      SimConfig c = base;
      c.n = n;
      c.alphas = a;
      validate_sim(c);
      cfg.grid.push_back(std::move(c));
    }
  }
  if (doc.contains("methods")) cfg.methods = parse_methods(doc);
  if (doc.contains("alpha")) cfg.alpha = get_as<double>(doc, "alpha");
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) config_fail("alpha must lie in (0, 1)");
  if (doc.contains("workers")) cfg.workers = get_as<int>(doc, "workers");
  if (cfg.workers < 1) config_fail("workers must be at least 1");
  if (doc.contains("output_dir")) cfg.output_dir = resolve(base_dir, get_as<std::string>(doc, "output_dir"));
  cfg.options = parse_options(doc);
  return cfg;
}

RocStudyConfig parse_roc_study(const json& doc, const std::filesystem::path& base_dir) {
  check_version(doc);
  std::set<std::string> keys = kSimKeys;
  keys.insert({"randomized_orders", "null_probability", "alpha_upper", "label_order", "threshold_step"});
  reject_unknown(doc, keys, "config");
  RocStudyConfig cfg;
  cfg.roc.base = parse_sim_base(doc);
  if (doc.contains("n")) cfg.roc.base.n = get_as<int>(doc, "n");
  if (doc.contains("alphas")) cfg.roc.base.alphas = get_as<std::vector<double>>(doc, "alphas");
  validate_sim(cfg.roc.base);
  const int m = cfg.roc.base.m;
  if (doc.contains("randomized_orders")) cfg.roc.randomized_orders = get_as<std::vector<int>>(doc, "randomized_orders");
  else for (int k = 2; k <= m; ++k) cfg.roc.randomized_orders.push_back(k);
  for (int k : cfg.roc.randomized_orders) {
    if (k < 1 || k > m) config_fail("randomized_orders entries must lie in [1, m]");
  }
  if (doc.contains("null_probability")) cfg.roc.null_probability = get_as<double>(doc, "null_probability");
  if (doc.contains("alpha_upper")) cfg.roc.alpha_upper = get_as<double>(doc, "alpha_upper");
  if (doc.contains("label_order")) cfg.roc.label_order = get_as<int>(doc, "label_order");
  if (doc.contains("threshold_step")) cfg.roc.threshold_step = get_as<double>(doc, "threshold_step");
  if (!(cfg.roc.null_probability >= 0.0 && cfg.roc.null_probability <= 1.0)) {
    config_fail("null_probability must lie in [0, 1]");
  }
  if (!(cfg.roc.alpha_upper > 0.0)) config_fail("alpha_upper must be positive");
  if (cfg.roc.label_order < 0 || cfg.roc.label_order > m) config_fail("label_order must lie in [0, m]");
  if (!(cfg.roc.threshold_step > 0.0 && cfg.roc.threshold_step <= 1.0)) {
    config_fail("threshold_step must lie in (0, 1]");
  }
  if (doc.contains("methods")) cfg.methods = parse_methods(doc);
  if (doc.contains("workers")) cfg.workers = get_as<int>(doc, "workers");
  if (cfg.workers < 1) config_fail("workers must be at least 1");
  if (doc.contains("output_dir")) cfg.output_dir = resolve(base_dir, get_as<std::string>(doc, "output_dir"));
  cfg.options = parse_options(doc);
  return cfg;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) config_fail("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    config_fail("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

json to_json(const SimConfig& c) {
  return {{"n", c.n},
          {"m", c.m},
          {"alphas", c.alphas},
          {"noise_sd", c.noise_sd},
          {"replicates", c.replicates},
          {"seed", c.seed},
          {"features_per_view", c.features_per_view},
          {"covariate_dim", c.covariate_dim},
          {"beta", c.beta},
          {"genotype_views", c.genotype_views}};
}

json to_json(const MethodOptions& o) {
  return {{"kernels", to_string(o.kernels)},
          {"reml", to_json(o.reml)},
          {"composite_variance", to_string(o.composite_variance)},
          {"pca", {{"partial_variance", o.pca_partial_variance}, {"max_components", o.pca_max_components}}}};
}

}  // namespace mvkm
