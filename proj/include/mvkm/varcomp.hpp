#pragma once

// REML estimation of variance components by projected Fisher scoring.

#include "mvkm/error.hpp"
#include "mvkm/glm.hpp"
#include "mvkm/kernels.hpp"

#include <Eigen/Dense>

#include <vector>

namespace mvkm {

/// theta = (sigma2, tau_t for each included term). Sigma(theta) = sigma2 R + sum_t tau_t K_t,
/// with R = I for gaussian data and R = W^{-1} on the working scale of other families.
struct VarianceComponents {
  double sigma2 = 1.0;
  std::vector<EffectTerm> terms;
  std::vector<double> taus;  // aligned with terms

  /// Throws missing-kernel when `term` is not included.
  double tau(const EffectTerm& term) const;

  static VarianceComponents null_model(double sigma2, std::vector<EffectTerm> terms);
};

/// sigma2 I + sum_t tau_t K_t.
MatrixXd covariance(const VarianceComponents& theta, const KernelFamily& family);

/// sigma2 diag(base_variance) + sum_t tau_t K_t.
MatrixXd covariance(const VarianceComponents& theta, const KernelFamily& family,
                    const VectorXd& base_variance);

/// -1/2 [ln|Sigma| + ln|X^T Sigma^{-1} X| + r^T Sigma^{-1} r + (n - q) ln 2 pi], r = y - X beta_gls.
/// Evaluated through Cholesky factors. Throws not-positive-definite.
double restricted_loglik(const VarianceComponents& theta, const VectorXd& y, const MatrixXd& X,
                         const KernelFamily& family);

double restricted_loglik(const VarianceComponents& theta, const VectorXd& y, const MatrixXd& X,
                         const KernelFamily& family, const VectorXd& base_variance);

/// Curvature used by the scoring step. Expected: I_jk = tr(P D_j P D_k) / 2.
/// Average: (P y)^T D_j P D_k (P y) / 2, which needs no n x n products per component.
enum class InformationKind { expected, average };

struct RemlOptions {
  std::vector<double> start_grid{0.01, 0.1, 0.5, 0.9};
  InformationKind information = InformationKind::average;
  bool moment_start = true;
  double tolerance = 1e-6;
  int max_iterations = 200;
  int max_halvings = 20;
  double sigma2_floor = 1e-8;
  // Working-response refits for non-gaussian families.
  int max_outer_iterations = 50;
  double outer_tolerance = 1e-5;
};

struct RemlFit {
  VarianceComponents theta;
  double restricted_loglik = 0.0;
  double gradient_norm = 0.0;  // projected score, on the internally standardised scale
  int iterations = 0;
  std::vector<double> start_point_used;  // (sigma2, taus...) on the standardised scale
  bool converged = false;

  // Working model the estimates refer to: y itself and R = I for gaussian data.
  VectorXd working_response;
  VectorXd base_variance;
  bool sigma2_fixed = false;
  bool sigma2_at_floor = false;
  int outer_iterations = 0;

  /// Restricted log-likelihood after each accepted step of the winning start.
  std::vector<double> loglik_trace;
  /// Final restricted log-likelihood reached from every start, in start order.
  std::vector<double> start_logliks;
};

class RemlNoConvergence : public Error {
 public:
  RemlNoConvergence(const std::string& what, RemlFit best)
      : Error(ErrorCode::no_convergence, what), best_(std::move(best)) {}
  const RemlFit& best_iterate() const { return best_; }

 private:
  RemlFit best_;
};

/// Gaussian REML with multi-start Fisher scoring. Returns the start with the largest
/// restricted log-likelihood.
RemlFit reml_fit(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                 const std::vector<EffectTerm>& terms, const RemlOptions& options = {});

/// Dispatches on the family: gaussian as above; binomial and poisson alternate working-response
/// updates with REML fits on (working response, W^{-1}) and keep sigma2 fixed at 1.
RemlFit reml_fit(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                 const std::vector<EffectTerm>& terms, const Family& response_family,
                 const RemlOptions& options = {});

/// Residual-space projection Sigma^{-1} - Sigma^{-1} X (X^T Sigma^{-1} X)^{-1} X^T Sigma^{-1}.
MatrixXd reml_projection(const MatrixXd& sigma, const MatrixXd& X);

}  // namespace mvkm
