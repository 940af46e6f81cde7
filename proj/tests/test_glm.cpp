#include "mvkm/glm.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace mvkm;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::invalid_parameter;
}

MatrixXd design(Eigen::Index n, Eigen::Index q, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  MatrixXd x(n, q);
  x.col(0).setOnes();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 1; j < q; ++j) x(i, j) = z(rng);
  }
  return x;
}

}  // namespace

TEST_CASE("links") {
  VectorXd half(1), zero(1), e(1);
  half << 0.5;
  zero << 0.0;
  e << std::exp(1.0);
  CHECK(link(Family::binomial(), half)[0] == doctest::Approx(0.0));
  CHECK(inverse_link(Family::binomial(), zero)[0] == doctest::Approx(0.5));
  CHECK(link(Family::poisson(), e)[0] == doctest::Approx(1.0));
  CHECK(link(Family::gaussian(), e)[0] == e[0]);
  VectorXd p(4);
  p << 0.01, 0.3, 0.77, 0.999;
  CHECK((inverse_link(Family::binomial(), link(Family::binomial(), p)) - p).cwiseAbs().maxCoeff() < 1e-12);
  VectorXd bad(2);
  bad << 0.5, 1.0;
  CHECK(code_of([&] { link(Family::binomial(), bad); }) == ErrorCode::domain_error);
  VectorXd neg(1);
  neg << -1.0;
  CHECK(code_of([&] { link(Family::poisson(), neg); }) == ErrorCode::domain_error);
}

TEST_CASE("family names") {
  CHECK(parse_family("binomial").kind == FamilyKind::binomial_logit);
  CHECK(parse_family("poisson").kind == FamilyKind::poisson_log);
  CHECK(family_name(FamilyKind::gaussian_identity) == "gaussian");
  CHECK(code_of([] { parse_family("gamma"); }) == ErrorCode::config_error);
  CHECK(code_of([] { parse_family("weibull"); }) == ErrorCode::config_error);
}

TEST_CASE("intercept-only binomial fits") {
  const MatrixXd x = MatrixXd::Ones(8, 1);
  VectorXd y(8);
  y << 1, 0, 1, 0, 1, 0, 1, 0;
  NullModelFit fit = fit_null_glm(y, x, Family::binomial());
  CHECK(fit.beta_hat[0] == doctest::Approx(0.0).epsilon(1e-10));
  CHECK((fit.mu_hat.array() - 0.5).abs().maxCoeff() < 1e-10);
  y << 1, 1, 1, 0, 1, 1, 1, 0;
  fit = fit_null_glm(y, x, Family::binomial());
  CHECK(fit.beta_hat[0] == doctest::Approx(std::log(3.0)).epsilon(1e-10));
  CHECK(fit.converged);
  CHECK(fit.dispersion == 1.0);
}

TEST_CASE("poisson intercept-only fit is the log mean") {
  VectorXd y(6);
  y << 0, 2, 3, 1, 4, 2;
  const NullModelFit fit = fit_null_glm(y, MatrixXd::Ones(6, 1), Family::poisson());
  CHECK(fit.beta_hat[0] == doctest::Approx(std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("gaussian fit matches the normal equations") {
  MatrixXd x(10, 2);
  VectorXd y(10);
  for (int i = 0; i < 10; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = i;
    y[i] = 2.0 + 0.5 * i + ((i * 7) % 5 - 2) * 0.3;
  }
  // Simple regression in closed form.
  const double xbar = 4.5, ybar = y.mean();
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 10; ++i) {
    sxy += (i - xbar) * (y[i] - ybar);
    sxx += (i - xbar) * (i - xbar);
  }
  const double slope = sxy / sxx, icpt = ybar - slope * xbar;
  const NullModelFit fit = fit_null_glm(y, x, Family::gaussian());
  CHECK(fit.beta_hat[0] == doctest::Approx(icpt).epsilon(1e-10));
  CHECK(fit.beta_hat[1] == doctest::Approx(slope).epsilon(1e-10));
  CHECK(fit.dispersion == doctest::Approx(fit.residuals.squaredNorm() / 10.0));
}

TEST_CASE("IRLS score vanishes and row permutations commute") {
  const Eigen::Index n = 60;
  const MatrixXd x = design(n, 3, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u;
  VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = u(rng) < 1.0 / (1.0 + std::exp(-(0.3 + 0.8 * x(i, 1)))) ? 1.0 : 0.0;
  const NullModelFit fit = fit_null_glm(y, x, Family::binomial());
  CHECK((x.transpose() * (y - fit.mu_hat)).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((fit.mu_hat.array() > 0.0).all());
  CHECK((fit.mu_hat.array() < 1.0).all());

  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MatrixXd xp(n, 3);
  VectorXd yp(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    xp.row(i) = x.row(perm[i]);
    yp[i] = y[perm[i]];
  }
  const NullModelFit fp = fit_null_glm(yp, xp, Family::binomial());
  CHECK((fp.beta_hat - fit.beta_hat).cwiseAbs().maxCoeff() < 1e-8);
  for (Eigen::Index i = 0; i < n; ++i) CHECK(fp.residuals[i] == doctest::Approx(fit.residuals[perm[i]]));
}

TEST_CASE("working projection") {
  const Eigen::Index n = 7;
  NullModelFit fit;
  fit.converged = true;
  fit.working_weights = VectorXd::Ones(n);
  fit.dispersion = 1.0;
  const MatrixXd centre = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / n);
  CHECK(working_projection(fit, MatrixXd::Ones(n, 1)).isApprox(centre, 1e-12));

  const MatrixXd x = design(40, 3, 8);
  std::mt19937_64 rng(9);
  std::poisson_distribution<int> pois(2.0);
  VectorXd y(40);
  for (auto& v : y) v = pois(rng);
  const MatrixXd p0 = working_projection(fit_null_glm(y, x, Family::poisson()), x);
  CHECK((p0 * x).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((p0 - p0.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("glm errors") {
  MatrixXd x = design(10, 3, 10);
  x.col(2) = 2.0 * x.col(1);
  VectorXd y = VectorXd::Zero(10);
  y.head(5).setOnes();
  CHECK(code_of([&] { fit_null_glm(y, x, Family::binomial()); }) == ErrorCode::singular_design);
  MatrixXd sep(10, 2);
  sep.col(0).setOnes();
  for (int i = 0; i < 10; ++i) sep(i, 1) = i - 4.5;
  VectorXd ys(10);
  for (int i = 0; i < 10; ++i) ys[i] = i >= 5 ? 1.0 : 0.0;
  CHECK(code_of([&] { fit_null_glm(ys, sep, Family::binomial()); }) == ErrorCode::separation);
  VectorXd nonbinary = ys;
  nonbinary[0] = 0.5;
  CHECK(code_of([&] { fit_null_glm(nonbinary, sep, Family::binomial()); }) == ErrorCode::domain_error);
}
