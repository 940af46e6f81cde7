#pragma once

// Canonical-link exponential families and null-model fitting by IRLS.

#include "mvkm/error.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <string_view>

namespace mvkm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class FamilyKind { gaussian_identity, binomial_logit, poisson_log };

struct Family {
  FamilyKind kind = FamilyKind::gaussian_identity;
  // Empty means all ones.
  std::optional<VectorXd> prior_weights;

  static Family gaussian() { return {FamilyKind::gaussian_identity, std::nullopt}; }
  static Family binomial() { return {FamilyKind::binomial_logit, std::nullopt}; }
  static Family poisson() { return {FamilyKind::poisson_log, std::nullopt}; }

  bool is_gaussian() const { return kind == FamilyKind::gaussian_identity; }
  VectorXd weights(Eigen::Index n) const;
};

/// "gaussian", "binomial", "poisson". The gamma family is recognised and rejected.
Family parse_family(std::string_view name);
std::string_view family_name(FamilyKind kind);

VectorXd link(const Family& family, const VectorXd& mu);
VectorXd inverse_link(const Family& family, const VectorXd& eta);
/// Variance function V(mu); for canonical links this is also d mu / d eta.
VectorXd variance_function(const Family& family, const VectorXd& mu);

struct NullModelFit {
  VectorXd beta_hat;
  VectorXd eta_hat;
  VectorXd mu_hat;
  VectorXd working_weights;  // V(mu_hat) times prior weight
  VectorXd residuals;        // y - mu_hat
  double dispersion = 1.0;   // RSS / n for gaussian, 1 otherwise
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
};

class GlmNoConvergence : public Error {
 public:
  GlmNoConvergence(const std::string& what, NullModelFit last)
      : Error(ErrorCode::no_convergence, what), last_(std::move(last)) {}
  const NullModelFit& last_iterate() const { return last_; }

 private:
  NullModelFit last_;
};

struct GlmOptions {
  double tolerance = 1e-8;  // max |X^T W (y - mu) / V| at the solution
  int max_iterations = 100;
  int max_halvings = 20;
  double separation_norm = 1e4;
};

/// Throws singular-design, separation, domain-error, or GlmNoConvergence.
NullModelFit fit_null_glm(const VectorXd& y, const MatrixXd& X, const Family& family,
                          const GlmOptions& options = {});

/// Log-likelihood of y at fitted means mu (gaussian uses the given dispersion).
double glm_loglik(const Family& family, const VectorXd& y, const VectorXd& mu, double dispersion,
                  const VectorXd& prior_weights);

/// P0 = W - W X (X^T W X)^{-1} X^T W, with W = working weights / dispersion.
MatrixXd working_projection(const NullModelFit& fit, const MatrixXd& X);

/// Throws singular-design unless X has full column rank and fewer columns than rows.
void require_full_rank(const MatrixXd& X);

}  // namespace mvkm
