#pragma once

// JSON configs for the simulation studies driven from the command line.

#include "mvkm/simulation.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mvkm {

/// Power study: every combination of `n` values and alpha vectors, each run on all methods.
struct PowerStudyConfig {
  int schema_version = 1;
  std::vector<SimConfig> grid;
  std::vector<Method> methods{Method::composite};
  double alpha = 0.05;
  int workers = 1;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "mvkm_out";
  MethodOptions options;
};

struct RocStudyConfig {
  int schema_version = 1;
  RocConfig roc;
  std::vector<Method> methods{Method::composite, Method::marginal_skat, Method::pca_partial};
  int workers = 1;
  std::filesystem::path output_dir = "mvkm_out";
  MethodOptions options;
};

/// Keys: schema_version, n (int or list), m, alphas (list, or list of lists), replicates, noise_sd,
/// features_per_view, covariate_dim, beta, genotype_views, methods, alpha, workers, seed,
/// output_dir, kernels, reml, composite_variance, pca. Unknown keys throw config-error.
PowerStudyConfig parse_power_study(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});

/// As above with a single n and alpha vector, plus randomized_orders, null_probability,
/// alpha_upper, label_order and threshold_step.
RocStudyConfig parse_roc_study(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});

/// Reads and parses a JSON file; throws config-error when unreadable or malformed.
nlohmann::json read_json_file(const std::filesystem::path& path);

nlohmann::json to_json(const SimConfig& cfg);
nlohmann::json to_json(const MethodOptions& options);

}  // namespace mvkm
