#include "mvkm/glm.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace mvkm {

VectorXd Family::weights(Eigen::Index n) const {
  if (!prior_weights) return VectorXd::Ones(n);
  if (prior_weights->size() != n) {
    throw Error(ErrorCode::dimension_mismatch, "prior weights do not match the subject count");
  }
  if ((prior_weights->array() <= 0.0).any()) {
    throw Error(ErrorCode::invalid_parameter, "prior weights must be strictly positive");
  }
  return *prior_weights;
}

Family parse_family(std::string_view name) {
  if (name == "gaussian" || name == "gaussian_identity") return Family::gaussian();
  if (name == "binomial" || name == "binomial_logit") return Family::binomial();
  if (name == "poisson" || name == "poisson_log") return Family::poisson();
  if (name == "gamma") {
    throw Error(ErrorCode::config_error, "the gamma family is not supported");
  }
  throw Error(ErrorCode::config_error, "unknown family '" + std::string(name) + "'");
}

std::string_view family_name(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::gaussian_identity: return "gaussian";
    case FamilyKind::binomial_logit: return "binomial";
    case FamilyKind::poisson_log: return "poisson";
  }
  return "unknown";
}

namespace {

[[noreturn]] void domain_fail(Eigen::Index i, double value, const char* what) {
  std::ostringstream msg;
  msg << what << " at index " << i << " (value " << value << ")";
  throw Error(ErrorCode::domain_error, msg.str());
}

double expit(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

void validate_response(const Family& family, const VectorXd& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double v = y[i];
    if (!std::isfinite(v)) domain_fail(i, v, "non-finite response");
    switch (family.kind) {
      case FamilyKind::gaussian_identity: break;
      case FamilyKind::binomial_logit:
        if (v != 0.0 && v != 1.0) domain_fail(i, v, "binomial response must be 0 or 1");
        break;
      case FamilyKind::poisson_log:
        if (v < 0.0 || v != std::floor(v)) domain_fail(i, v, "poisson response must be a count");
        break;
    }
  }
}

}  // namespace

VectorXd link(const Family& family, const VectorXd& mu) {
  VectorXd out(mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double p = mu[i];
    switch (family.kind) {
      case FamilyKind::gaussian_identity:
        if (!std::isfinite(p)) domain_fail(i, p, "identity link needs a finite value");
        out[i] = p;
        break;
      case FamilyKind::binomial_logit:
        if (!(p > 0.0 && p < 1.0)) domain_fail(i, p, "logit needs p in (0, 1)");
        out[i] = std::log(p / (1.0 - p));
        break;
      case FamilyKind::poisson_log:
        if (!(p > 0.0) || !std::isfinite(p)) domain_fail(i, p, "log link needs p > 0");
        out[i] = std::log(p);
        break;
    }
  }
  return out;
}

VectorXd inverse_link(const Family& family, const VectorXd& eta) {
  VectorXd out(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double e = eta[i];
    if (!std::isfinite(e)) domain_fail(i, e, "non-finite linear predictor");
    switch (family.kind) {
      case FamilyKind::gaussian_identity: out[i] = e; break;
      case FamilyKind::binomial_logit: out[i] = expit(e); break;
      case FamilyKind::poisson_log: out[i] = std::exp(e); break;
    }
  }
  return out;
}

VectorXd variance_function(const Family& family, const VectorXd& mu) {
  switch (family.kind) {
    case FamilyKind::gaussian_identity: return VectorXd::Ones(mu.size());
    case FamilyKind::binomial_logit: return (mu.array() * (1.0 - mu.array())).matrix();
    case FamilyKind::poisson_log: return mu;
  }
  return VectorXd::Ones(mu.size());
}

double glm_loglik(const Family& family, const VectorXd& y, const VectorXd& mu, double dispersion,
                  const VectorXd& w) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    switch (family.kind) {
      case FamilyKind::gaussian_identity: {
        const double r = y[i] - mu[i];
        ll += -0.5 * (std::log(2.0 * std::numbers::pi * dispersion / w[i]) + w[i] * r * r / dispersion);
        break;
      }
      case FamilyKind::binomial_logit: {
        const double p = mu[i];
        if (y[i] > 0.0) ll += w[i] * (p > 0.0 ? std::log(p) : -745.0);
        else ll += w[i] * (p < 1.0 ? std::log1p(-p) : -745.0);
        break;
      }
      case FamilyKind::poisson_log:
        ll += w[i] * ((y[i] > 0.0 ? y[i] * std::log(mu[i]) : 0.0) - mu[i] - std::lgamma(y[i] + 1.0));
        break;
    }
  }
  return ll;
}

void require_full_rank(const MatrixXd& X) {
  if (X.cols() == 0) throw Error(ErrorCode::singular_design, "design has no columns");
  if (X.cols() >= X.rows()) {
    throw Error(ErrorCode::singular_design, "design needs fewer columns than rows");
  }
  Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols()) {
    throw Error(ErrorCode::singular_design,
                "design has rank " + std::to_string(qr.rank()) + " < " + std::to_string(X.cols()));
  }
}

NullModelFit fit_null_glm(const VectorXd& y, const MatrixXd& X, const Family& family,
                          const GlmOptions& options) {
  const Eigen::Index n = y.size();
  if (X.rows() != n) throw Error(ErrorCode::dimension_mismatch, "y and X row counts differ");
  require_full_rank(X);
  validate_response(family, y);
  const VectorXd w = family.weights(n);

  NullModelFit fit;
  auto finish = [&](const VectorXd& beta) {
    fit.beta_hat = beta;
    fit.eta_hat = X * beta;
    fit.mu_hat = inverse_link(family, fit.eta_hat);
    fit.residuals = y - fit.mu_hat;
    fit.working_weights = (variance_function(family, fit.mu_hat).array() * w.array()).matrix();
    if (family.is_gaussian()) {
      fit.dispersion = (w.array() * fit.residuals.array().square()).sum() / static_cast<double>(n);
      if (!(fit.dispersion > 0.0)) {
        throw Error(ErrorCode::degenerate_distribution, "gaussian null model fits exactly");
      }
    } else {
      fit.dispersion = 1.0;
    }
    fit.loglik = glm_loglik(family, y, fit.mu_hat, fit.dispersion, w);
  };

  if (family.is_gaussian()) {
    const MatrixXd xtw = X.transpose() * w.asDiagonal();
    Eigen::LLT<MatrixXd> llt(xtw * X);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::singular_design, "X^T W X is singular");
    finish(llt.solve(xtw * y));
    fit.converged = true;
    fit.iterations = 1;
    return fit;
  }

  if (family.kind == FamilyKind::binomial_logit && (y.array() == y[0]).all()) {
    throw Error(ErrorCode::separation, "binary response has a single class");
  }

  // Standard starting means pulled away from the boundary.
  VectorXd mu0(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    mu0[i] = family.kind == FamilyKind::binomial_logit ? (y[i] + 0.5) / 2.0 : y[i] + 0.1;
  }
  VectorXd eta = link(family, mu0);
  VectorXd mu = mu0;
  VectorXd beta = VectorXd::Zero(X.cols());
  double ll = -std::numeric_limits<double>::infinity();
  bool first = true;

  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    const VectorXd v = variance_function(family, mu);
    const VectorXd ww = (v.array() * w.array()).matrix();
    const VectorXd z = eta + ((y - mu).array() / v.array()).matrix();
    const MatrixXd xtw = X.transpose() * ww.asDiagonal();
    Eigen::LLT<MatrixXd> llt(xtw * X);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::singular_design, "X^T W X is singular");
    const VectorXd target = llt.solve(xtw * z);
    if (!target.allFinite()) throw Error(ErrorCode::separation, "fitted probabilities reach 0 or 1");

    VectorXd step = first ? VectorXd(target) : VectorXd(target - beta);
    VectorXd candidate = first ? target : VectorXd(beta + step);
    double ll_new = glm_loglik(family, y, inverse_link(family, X * candidate), 1.0, w);
    for (int h = 0; !first && ll_new < ll - 1e-12 * std::abs(ll) && h < options.max_halvings; ++h) {
      step *= 0.5;
      candidate = beta + step;
      ll_new = glm_loglik(family, y, inverse_link(family, X * candidate), 1.0, w);
    }
    first = false;
    beta = candidate;
    ll = ll_new;
    fit.iterations = iter;

    if (!beta.allFinite() || beta.norm() > options.separation_norm) {
      throw Error(ErrorCode::separation, "coefficients diverge (|beta| > " +
                                             std::to_string(options.separation_norm) + ")");
    }
    eta = X * beta;
    mu = inverse_link(family, eta);
    const VectorXd score = X.transpose() * (w.array() * (y - mu).array()).matrix();
    if (score.cwiseAbs().maxCoeff() < options.tolerance) {
      if (family.kind == FamilyKind::binomial_logit && ll > -1e-6) {
        throw Error(ErrorCode::separation, "fitted probabilities reach 0 or 1");
      }
      finish(beta);
      fit.converged = true;
      return fit;
    }
  }

  if (family.kind == FamilyKind::binomial_logit && ll > -1e-6) {
    throw Error(ErrorCode::separation, "fitted probabilities reach 0 or 1");
  }
  NullModelFit last;
  try {
    fit.converged = false;
    finish(beta);
    last = fit;
  } catch (const Error&) {
  }
  throw GlmNoConvergence("IRLS did not converge in " + std::to_string(options.max_iterations) +
                             " iterations",
                         last);
}

MatrixXd working_projection(const NullModelFit& fit, const MatrixXd& X) {
  if (!fit.converged) throw Error(ErrorCode::no_convergence, "null model did not converge");
  const VectorXd wdiag = fit.working_weights / fit.dispersion;
  const MatrixXd wx = wdiag.asDiagonal() * X;
  Eigen::LLT<MatrixXd> llt(X.transpose() * wx);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::singular_design, "X^T W X is singular");
  MatrixXd p0 = -wx * llt.solve(wx.transpose());
  p0.diagonal() += wdiag;
  return 0.5 * (p0 + p0.transpose());
}

}  // namespace mvkm
