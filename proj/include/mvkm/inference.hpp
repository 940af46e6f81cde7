#pragma once

// Variance-component score tests with Satterthwaite scaled chi-square p-values.

#include "mvkm/glm.hpp"
#include "mvkm/kernels.hpp"
#include "mvkm/varcomp.hpp"

#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace mvkm {

enum class TestKind { overall, marginal, interaction, composite };

std::string_view to_string(TestKind kind);

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

/// For e ~ N(0, V): E[e^T A e] = tr(AV), Var[e^T A e] = 2 tr(AVAV).
Moments quadratic_form_moments(const MatrixXd& A, const MatrixXd& V);

struct ScaledChiSquare {
  double scale = 1.0;  // gamma
  double df = 1.0;     // nu
};

/// Solves mean = gamma nu, variance = 2 gamma^2 nu. Throws degenerate-distribution.
ScaledChiSquare satterthwaite(double mean, double variance);

/// P(gamma chi2_nu > S). Results below 1e-300 are clamped to 1e-300.
double scaled_chisq_pvalue(double statistic, double scale, double df);

/// Benjamini-Hochberg step-up adjustment, returned in input order.
std::vector<double> bh_adjust(std::span<const double> pvalues);

struct TestResult {
  TestKind kind = TestKind::overall;
  EffectTerm term;  // tested term; unset for the overall test
  double statistic = 0.0;
  double scale = 1.0;
  double df = 0.0;
  double p_value = 1.0;
  Moments null_moments;
  std::optional<VarianceComponents> null_theta;  // composite only
};

/// Null GLM fit plus the null covariance of its residuals, shared by every kernel score test
/// on the same (y, X). Residual covariance is dispersion^2 * P0.
class ScoreTestNull {
 public:
  ScoreTestNull(const VectorXd& y, const MatrixXd& X, const Family& family);

  const NullModelFit& fit() const { return fit_; }
  const MatrixXd& residual_covariance() const { return residual_cov_; }

  /// S = r^T K r / (2 dispersion); moments use A = K / (2 dispersion) and V = dispersion^2 P0.
  TestResult test(const MatrixXd& kernel, TestKind kind, EffectTerm term = {}) const;

 private:
  NullModelFit fit_;
  MatrixXd residual_cov_;
};

/// H0: every component zero; kernel is the sum of all Grams in the family.
TestResult overall_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                        const Family& response_family);

/// H0: tau for a single view is zero, other components excluded from the null.
TestResult marginal_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                         const EffectTerm& term, const Family& response_family);

/// H0: tau for an interaction term of order >= 2 is zero, lower orders excluded from the null.
TestResult interaction_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                            const EffectTerm& term, const Family& response_family);

/// Default null terms for a composite test: every family term of lower order than `target`.
std::vector<EffectTerm> default_null_terms(const KernelFamily& family, const EffectTerm& target);

/// How the composite statistic accounts for the estimated null components.
/// plain: S and its moments under Sigma(theta~) as they stand.
/// efficient_variance: variance reduced to (I_tt - I_ta I_aa^-1 I_at) / sigma2^2 over the interior
///   components a (tau > 0), I being the expected REML information.
/// orthogonal_score: the target score is also orthogonalised against every null-term score,
///   S - I_ta I_aa^-1 U_a / sigma2 with a running over all null terms, scores taken at theta~;
///   interior scores vanish, so only boundary components move the statistic. Negative values
///   are reported as 0.
enum class CompositeVariance { plain, efficient_variance, orthogonal_score };

std::string_view to_string(CompositeVariance variance);
/// Throws config-error for an unknown name.
CompositeVariance parse_composite_variance(std::string_view name);

/// H0: tau_target = 0 with the null terms' components estimated by REML.
/// S = y~^T B K B y~ / (2 sigma2), B the REML projection at the null estimate.
TestResult composite_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                          const EffectTerm& target, const Family& response_family,
                          std::optional<std::vector<EffectTerm>> null_terms = std::nullopt,
                          const RemlOptions& options = {},
                          CompositeVariance variance = CompositeVariance::orthogonal_score);

/// sigma2 in the orthogonalisation: fixed by the family, estimated at a stationary point of the
/// restricted likelihood (zero score), or anywhere else (score evaluated).
enum class Sigma2Role { fixed, stationary, nonstationary };

/// Composite statistic at a given null estimate on the working scale (y~, R = base_variance).
TestResult composite_test_at(const VectorXd& working_response, const MatrixXd& X,
                             const KernelFamily& family, const EffectTerm& target,
                             const VarianceComponents& null_theta, const VectorXd& base_variance,
                             CompositeVariance variance = CompositeVariance::orthogonal_score,
                             Sigma2Role sigma2 = Sigma2Role::fixed);

}  // namespace mvkm
