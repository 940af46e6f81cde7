#pragma once

// Synthetic multi-view data, power studies, ROC studies and a PCA-regression baseline.

#include "mvkm/glm.hpp"
#include "mvkm/inference.hpp"
#include "mvkm/kernels.hpp"
#include "mvkm/varcomp.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mvkm {

struct MultiViewDataset {
  VectorXd y;
  MatrixXd covariates;  // includes the intercept column
  std::vector<ViewMatrix> views;
  std::vector<std::string> subject_ids;

  Eigen::Index subjects() const { return y.size(); }
};

/// Settings for the binary-phenotype generator
///   eta = X beta + sum_k alpha_k * (sum of order-k effects) + noise_sd * eps,  y ~ Bernoulli(expit(eta)).
/// Order-1 effect of a view: sum_j cos(z_j). Order k >= 2 effect of a view set S:
/// prod over S of (sum_j z_j / sqrt(p)), the standardised view mean. z are the features,
/// standardised to mean 0 / variance 1 for genotype views.
struct SimConfig {
  int n = 500;
  int m = 5;
  std::vector<double> alphas;  // one per order 1..m; missing entries are 0
  double noise_sd = 1e-2;
  int replicates = 1000;
  std::uint64_t seed = 1;
  int features_per_view = 10;
  int covariate_dim = 3;  // intercept + (covariate_dim - 1) standard normals
  std::vector<double> beta{0.5, 0.5, 0.5};
  std::vector<int> genotype_views{0};  // zero-based; drawn from {0,1,2} w.p. {1/4,1/2,1/4}

  double alpha(int order) const;
  void validate() const;
};

/// Counter-based stream splitting (SplitMix64 of master seed and index).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// One dataset drawn with cfg.seed.
MultiViewDataset generate_synthetic(const SimConfig& cfg);

/// Replicate `index` of a study: generate_synthetic with derive_seed(cfg.seed, index).
MultiViewDataset generate_replicate(const SimConfig& cfg, std::uint64_t index);

/// Default kernels for each view (IBS for genotype, median-bandwidth Gaussian otherwise).
std::vector<KernelSpec> default_kernels(const std::vector<ViewMatrix>& views);

/// y = X beta + L z with L L^T = sigma and z standard normal.
VectorXd simulate_gaussian_response(const MatrixXd& X, const VectorXd& beta, const MatrixXd& sigma,
                                    std::uint64_t seed);

enum class Method { composite, overall, marginal_skat, pca_partial, pca_full };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);

/// Kernels applied to simulated views: the defaults above, or a linear kernel on
/// column-standardised features for every view.
enum class KernelChoice { defaults, linear_standardized };

std::string_view to_string(KernelChoice choice);
KernelChoice parse_kernel_choice(std::string_view name);

struct MethodOptions {
  KernelChoice kernels = KernelChoice::defaults;
  double pca_partial_variance = 0.8;
  int pca_max_components = 5;
  RemlOptions reml;
  CompositeVariance composite_variance = CompositeVariance::orthogonal_score;
};

struct PcaRegressionResult {
  double p_value = 1.0;
  double statistic = 0.0;  // likelihood-ratio statistic
  int components = 0;
  int product_columns = 0;
};

/// Principal components of the concatenated, column-standardised views (at most max_components,
/// enough to reach `variance_kept` of the total variance) and all their pairwise products
/// (squares included) enter a GLM; likelihood-ratio test of the product block.
PcaRegressionResult pca_regression_test(const VectorXd& y, const MatrixXd& X,
                                        std::span<const ViewMatrix> views, double variance_kept,
                                        const Family& family = Family::binomial(),
                                        int max_components = 5);

/// p-value of one method on one dataset. Composite targets the full m-view term;
/// marginal_skat is the Bonferroni-combined minimum of the m marginal tests.
double method_pvalue(Method method, const MultiViewDataset& data, const KernelFamily& family,
                     const Family& response_family, const MethodOptions& options = {});

struct ReplicateOutcome {
  std::vector<double> p_values;  // per method; NaN on failure
  std::vector<std::string> errors;
};

/// Runs every method on each replicate of `cfg`. Output order follows replicate index.
std::vector<ReplicateOutcome> run_replicates(const SimConfig& cfg, const std::vector<Method>& methods,
                                             int workers, const MethodOptions& options = {});

struct PowerRow {
  int n = 0;
  int m = 0;
  std::vector<double> alphas;
  Method method = Method::composite;
  int replicates = 0;
  int rejections = 0;
  int failures = 0;
  double nominal_level = 0.05;
  double rejection_rate = 0.0;  // rejections / replicates; failures count as non-rejections
  double ci_low = 0.0;          // Wilson 95% interval
  double ci_high = 0.0;
};

std::vector<PowerRow> power_study(const std::vector<SimConfig>& grid, const std::vector<Method>& methods,
                                  double nominal_level = 0.05, int workers = 1,
                                  const MethodOptions& options = {});

/// Tab-separated power table with a header row.
std::string power_table_tsv(const std::vector<PowerRow>& rows);

struct RocConfig {
  SimConfig base;                     // non-randomised alphas come from here
  std::vector<int> randomized_orders;  // one-based orders whose alpha is redrawn per replicate
  double null_probability = 0.5;       // chance a randomised alpha is exactly 0
  double alpha_upper = 1.0;            // otherwise alpha ~ Uniform(0, alpha_upper)
  int label_order = 0;                 // replicate is positive iff alpha_{label_order} > 0; 0 means m
  double threshold_step = 1e-4;
};

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  Method method = Method::composite;
  std::vector<RocPoint> points;
  double auc = 0.0;
  int positives = 0;
  int negatives = 0;
  int failures = 0;
};

/// Points (t, FPR(t), TPR(t)) for thresholds t = 0, step, ..., 1 with "p <= t" calling positive.
std::vector<RocPoint> roc_points(std::span<const double> p_values, const std::vector<bool>& labels,
                                 double step = 1e-4);

/// Mann-Whitney AUC where smaller p-values rank as more positive (ties count one half).
double roc_auc(std::span<const double> p_values, const std::vector<bool>& labels);

/// Alphas for replicate `index` under the randomised scheme (drawn from their own stream).
std::vector<double> roc_alphas(const RocConfig& cfg, std::uint64_t index);

std::vector<RocCurve> roc_curve(const RocConfig& cfg, const std::vector<Method>& methods, int workers = 1,
                                const MethodOptions& options = {});

std::string roc_table_tsv(const std::vector<RocCurve>& curves);

}  // namespace mvkm
