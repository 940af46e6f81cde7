#include "mvkm/inference.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace mvkm {

std::string_view to_string(TestKind kind) {
  switch (kind) {
    case TestKind::overall: return "overall";
    case TestKind::marginal: return "marginal";
    case TestKind::interaction: return "interaction";
    case TestKind::composite: return "composite";
  }
  return "unknown";
}

std::string_view to_string(CompositeVariance variance) {
  switch (variance) {
    case CompositeVariance::plain: return "plain";
    case CompositeVariance::efficient_variance: return "efficient_variance";
    case CompositeVariance::orthogonal_score: return "orthogonal_score";
  }
  return "unknown";
}

CompositeVariance parse_composite_variance(std::string_view name) {
  for (CompositeVariance v : {CompositeVariance::plain, CompositeVariance::efficient_variance,
                              CompositeVariance::orthogonal_score}) {
    if (to_string(v) == name) return v;
  }
  throw Error(ErrorCode::config_error, "composite variance '" + std::string(name) +
                                           "' is not plain, efficient_variance or orthogonal_score");
}

Moments quadratic_form_moments(const MatrixXd& A, const MatrixXd& V) {
  if (A.rows() != A.cols() || V.rows() != V.cols() || A.rows() != V.rows()) {
    throw Error(ErrorCode::dimension_mismatch, "quadratic form needs conformable square matrices");
  }
  const MatrixXd av = A * V;
  Moments m;
  m.mean = av.trace();
  m.variance = 2.0 * (av.array() * av.transpose().array()).sum();
  return m;
}

ScaledChiSquare satterthwaite(double mean, double variance) {
  if (!(mean > 0.0) || !(variance > 0.0) || !std::isfinite(mean) || !std::isfinite(variance)) {
    throw Error(ErrorCode::degenerate_distribution,
                "Satterthwaite approximation needs positive mean and variance");
  }
  return {variance / (2.0 * mean), 2.0 * mean * mean / variance};
}

double scaled_chisq_pvalue(double statistic, double scale, double df) {
  if (!(scale > 0.0) || !(df > 0.0) || std::isnan(statistic)) {
    throw Error(ErrorCode::invalid_parameter, "scaled chi-square needs scale > 0 and df > 0");
  }
  if (statistic <= 0.0) return 1.0;
  const double x = statistic / scale;
  double p = 0.0;
  if (df > 1e7) {
    // Wilson-Hilferty cube-root normal approximation.
    const double v = 2.0 / (9.0 * df);
    const double z = (std::cbrt(x / df) - (1.0 - v)) / std::sqrt(v);
    p = 0.5 * std::erfc(z / std::numbers::sqrt2);
  } else {
    try {
      p = boost::math::gamma_q(0.5 * df, 0.5 * x);
    } catch (const std::overflow_error&) {
      // Only reached far out in one tail.
      p = x < df ? 1.0 : 0.0;
    }
  }
  return std::clamp(p, 1e-300, 1.0);
}

std::vector<double> bh_adjust(std::span<const double> pvalues) {
  const std::size_t m = pvalues.size();
  for (double p : pvalues) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw Error(ErrorCode::invalid_parameter, "p-values must lie in [0, 1]");
    }
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
  std::vector<double> adjusted(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const std::size_t i = order[k];
    running = std::min(running, pvalues[i] * static_cast<double>(m) / static_cast<double>(k + 1));
    adjusted[i] = std::min(running, 1.0);
  }
  return adjusted;
}

namespace {

// Zero-mean, zero-variance nulls (e.g. an all-zero kernel) give S = 0 and p = 1.
TestResult finish(TestResult r) {
  if (r.null_moments.mean <= 0.0 && r.null_moments.variance <= 0.0 && r.statistic <= 0.0) {
    r.scale = 1.0;
    r.df = 0.0;
    r.p_value = 1.0;
    return r;
  }
  const ScaledChiSquare sc = satterthwaite(r.null_moments.mean, r.null_moments.variance);
  r.scale = sc.scale;
  r.df = sc.df;
  r.p_value = scaled_chisq_pvalue(r.statistic, sc.scale, sc.df);
  return r;
}

}  // namespace

ScoreTestNull::ScoreTestNull(const VectorXd& y, const MatrixXd& X, const Family& family)
    : fit_(fit_null_glm(y, X, family)) {
  residual_cov_ = working_projection(fit_, X) * (fit_.dispersion * fit_.dispersion);
}

TestResult ScoreTestNull::test(const MatrixXd& kernel, TestKind kind, EffectTerm term) const {
  if (kernel.rows() != fit_.residuals.size() || kernel.cols() != kernel.rows()) {
    throw Error(ErrorCode::dimension_mismatch, "kernel does not match the subject count");
  }
  const double prefactor = 1.0 / (2.0 * fit_.dispersion);
  TestResult r;
  r.kind = kind;
  r.term = std::move(term);
  r.statistic = prefactor * fit_.residuals.dot(kernel * fit_.residuals);
  r.null_moments = quadratic_form_moments(prefactor * kernel, residual_cov_);
  return finish(std::move(r));
}

TestResult overall_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                        const Family& response_family) {
  if (family.size() == 0) throw Error(ErrorCode::missing_kernel, "empty kernel family");
  return ScoreTestNull(y, X, response_family).test(family.sum(), TestKind::overall);
}

TestResult marginal_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                         const EffectTerm& term, const Family& response_family) {
  if (term.order() != 1) throw Error(ErrorCode::invalid_parameter, "marginal test needs a single view");
  return ScoreTestNull(y, X, response_family).test(family.gram(term), TestKind::marginal, term);
}

TestResult interaction_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                            const EffectTerm& term, const Family& response_family) {
  if (term.order() < 2) {
    throw Error(ErrorCode::invalid_parameter, "interaction test needs a term of order >= 2");
  }
  return ScoreTestNull(y, X, response_family).test(family.gram(term), TestKind::interaction, term);
}

std::vector<EffectTerm> default_null_terms(const KernelFamily& family, const EffectTerm& target) {
  std::vector<EffectTerm> out;
  for (const auto& t : family.terms()) {
    if (t.order() < target.order()) out.push_back(t);
  }
  return out;
}

TestResult composite_test_at(const VectorXd& working_response, const MatrixXd& X,
                             const KernelFamily& family, const EffectTerm& target,
                             const VarianceComponents& null_theta, const VectorXd& base_variance,
                             CompositeVariance variance, Sigma2Role sigma2) {
  if (!(null_theta.sigma2 > 0.0)) {
    throw Error(ErrorCode::not_positive_definite, "null sigma2 must be positive");
  }
  const MatrixXd& k = family.gram(target);
  const MatrixXd sigma = covariance(null_theta, family, base_variance);
  const MatrixXd b = reml_projection(sigma, X);
  const VectorXd by = b * working_response;
  const double prefactor = 1.0 / (2.0 * null_theta.sigma2);

  TestResult r;
  r.kind = TestKind::composite;
  r.term = target;
  r.statistic = prefactor * by.dot(k * by);
  const MatrixXd bk = b * k;
  const MatrixXd a = prefactor * (bk * b);
  r.null_moments = quadratic_form_moments(a, sigma);
  r.null_theta = null_theta;

  if (variance == CompositeVariance::plain) return finish(std::move(r));

  const bool all_terms = variance == CompositeVariance::orthogonal_score;
  std::vector<MatrixXd> bd;
  std::vector<double> score;
  if (sigma2 != Sigma2Role::fixed && !null_theta.terms.empty()) {
    bd.push_back(b * base_variance.asDiagonal());
    score.push_back(sigma2 == Sigma2Role::stationary
                        ? 0.0
                        : 0.5 * by.dot(base_variance.cwiseProduct(by)) - 0.5 * bd.back().trace());
  }
  for (std::size_t t = 0; t < null_theta.terms.size(); ++t) {
    if (!all_terms && !(null_theta.taus[t] > 0.0)) continue;
    const MatrixXd& kt = family.gram(null_theta.terms[t]);
    bd.push_back(b * kt);
    // Zero at interior estimates; at the boundary it is the (nonpositive) projected score.
    score.push_back(null_theta.taus[t] > 0.0 ? 0.0 : 0.5 * by.dot(kt * by) - 0.5 * bd.back().trace());
  }
  if (!bd.empty()) {
    const auto m = static_cast<Eigen::Index>(bd.size());
    auto half_trace = [](const MatrixXd& x, const MatrixXd& y) {
      return 0.5 * (x.array() * y.transpose().array()).sum();
    };
    MatrixXd info(m, m);
    VectorXd cross(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      cross[i] = half_trace(bk, bd[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = i; j < m; ++j) {
        info(i, j) = info(j, i) = half_trace(bd[static_cast<std::size_t>(i)], bd[static_cast<std::size_t>(j)]);
      }
    }
    const VectorXd w = info.completeOrthogonalDecomposition().solve(cross);
    const double s2 = null_theta.sigma2;
    r.null_moments.variance = std::max(r.null_moments.variance - cross.dot(w) / (s2 * s2), 0.0);
    const VectorXd u = Eigen::Map<const VectorXd>(score.data(), m);
    r.statistic = std::max(r.statistic - w.dot(u) / s2, 0.0);
  }
  return finish(std::move(r));
}

TestResult composite_test(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                          const EffectTerm& target, const Family& response_family,
                          std::optional<std::vector<EffectTerm>> null_terms,
                          const RemlOptions& options, CompositeVariance variance) {
  (void)family.gram(target);
  std::vector<EffectTerm> nulls = null_terms ? *null_terms : default_null_terms(family, target);
  if (std::find(nulls.begin(), nulls.end(), target) != nulls.end()) {
    throw Error(ErrorCode::invalid_parameter, "the composite target cannot be a null term");
  }

  // With no null components, or all of them estimated at zero, the null model is the GLM itself.
  auto at_glm = [&](VarianceComponents theta) {
    const NullModelFit glm = fit_null_glm(y, X, response_family);
    if (response_family.is_gaussian()) {
      theta.sigma2 = glm.dispersion;
      const VectorXd w = response_family.weights(y.size());
      return composite_test_at(y, X, family, target, theta, (1.0 / w.array()).matrix(), variance,
                               Sigma2Role::nonstationary);
    }
    const VectorXd v = variance_function(response_family, glm.mu_hat);
    const VectorXd working = glm.eta_hat + ((y - glm.mu_hat).array() / v.array()).matrix();
    theta.sigma2 = 1.0;
    return composite_test_at(working, X, family, target, theta, (1.0 / glm.working_weights.array()).matrix(),
                             variance);
  };
  if (nulls.empty()) return at_glm(VarianceComponents{});

  const RemlFit fit = reml_fit(y, X, family, nulls, response_family, options);
  if (std::all_of(fit.theta.taus.begin(), fit.theta.taus.end(), [](double t) { return t == 0.0; })) {
    return at_glm(fit.theta);
  }
  const Sigma2Role role = fit.sigma2_fixed      ? Sigma2Role::fixed
                          : fit.sigma2_at_floor ? Sigma2Role::nonstationary
                                                : Sigma2Role::stationary;
  return composite_test_at(fit.working_response, X, family, target, fit.theta, fit.base_variance, variance, role);
}

}  // namespace mvkm
