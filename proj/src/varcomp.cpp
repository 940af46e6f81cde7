#include "mvkm/varcomp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

namespace mvkm {

double VarianceComponents::tau(const EffectTerm& term) const {
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i] == term) return taus[i];
  }
  throw Error(ErrorCode::missing_kernel, "no variance component for term " + term.label());
}

VarianceComponents VarianceComponents::null_model(double sigma2, std::vector<EffectTerm> terms) {
  VarianceComponents theta;
  theta.sigma2 = sigma2;
  theta.taus.assign(terms.size(), 0.0);
  theta.terms = std::move(terms);
  return theta;
}

MatrixXd covariance(const VarianceComponents& theta, const KernelFamily& family,
                    const VectorXd& base_variance) {
  const Eigen::Index n = family.subjects();
  if (base_variance.size() != n) {
    throw Error(ErrorCode::dimension_mismatch, "base variance does not match the subject count");
  }
  if (theta.taus.size() != theta.terms.size()) {
    throw Error(ErrorCode::invalid_parameter, "one tau per term is required");
  }
  MatrixXd sigma = MatrixXd::Zero(n, n);
  sigma.diagonal() = theta.sigma2 * base_variance;
  for (std::size_t t = 0; t < theta.terms.size(); ++t) {
    const MatrixXd& k = family.gram(theta.terms[t]);
    if (theta.taus[t] != 0.0) sigma.noalias() += theta.taus[t] * k;
  }
  return sigma;
}

MatrixXd covariance(const VarianceComponents& theta, const KernelFamily& family) {
  return covariance(theta, family, VectorXd::Ones(family.subjects()));
}

MatrixXd reml_projection(const MatrixXd& sigma, const MatrixXd& X) {
  Eigen::LLT<MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::not_positive_definite, "covariance is not positive definite");
  }
  MatrixXd p = llt.solve(MatrixXd::Identity(sigma.rows(), sigma.cols()));
  const MatrixXd sinv_x = llt.solve(X);
  Eigen::LLT<MatrixXd> xtsx(X.transpose() * sinv_x);
  if (xtsx.info() != Eigen::Success) {
    throw Error(ErrorCode::singular_design, "X^T Sigma^{-1} X is singular");
  }
  p.noalias() -= sinv_x * xtsx.solve(sinv_x.transpose());
  return 0.5 * (p + p.transpose());
}

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;

// Components are ordered (sigma2, tau_1, ..., tau_k); kernel t enters as K_t / scale_t.
struct ScoringProblem {
  const VectorXd& y;
  const MatrixXd& X;
  std::vector<const MatrixXd*> kernels;
  std::vector<double> scale;
  VectorXd base;
  bool fixed_sigma2 = false;

  Eigen::Index n() const { return y.size(); }
  int dim() const { return 1 + static_cast<int>(kernels.size()); }
  bool is_free(int j) const { return j > 0 || !fixed_sigma2; }

  MatrixXd sigma(const VectorXd& theta) const {
    MatrixXd s = MatrixXd::Zero(n(), n());
    s.diagonal() = theta[0] * base;
    for (std::size_t t = 0; t < kernels.size(); ++t) {
      const double c = theta[static_cast<Eigen::Index>(t) + 1] / scale[t];
      if (c != 0.0) s.noalias() += c * *kernels[t];
    }
    return s;
  }
};

struct Evaluation {
  double loglik = 0.0;
  Eigen::LLT<MatrixXd> llt;
  MatrixXd sinv_x;
  Eigen::LLT<MatrixXd> xtsx;
};

std::optional<Evaluation> evaluate(const ScoringProblem& prob, const VectorXd& theta) {
  Evaluation ev;
  ev.llt.compute(prob.sigma(theta));
  if (ev.llt.info() != Eigen::Success) return std::nullopt;
  const auto diag = ev.llt.matrixLLT().diagonal();
  if ((diag.array() <= 0.0).any()) return std::nullopt;
  const double logdet = 2.0 * diag.array().log().sum();
  ev.sinv_x = ev.llt.solve(prob.X);
  ev.xtsx.compute(prob.X.transpose() * ev.sinv_x);
  if (ev.xtsx.info() != Eigen::Success) return std::nullopt;
  const double logdet_x = 2.0 * ev.xtsx.matrixLLT().diagonal().array().log().sum();
  const VectorXd beta = ev.xtsx.solve(ev.sinv_x.transpose() * prob.y);
  const VectorXd r = prob.y - prob.X * beta;
  const double quad = r.dot(ev.llt.solve(r));
  const double dof = static_cast<double>(prob.n() - prob.X.cols());
  ev.loglik = -0.5 * (logdet + logdet_x + quad + dof * kLogTwoPi);
  if (!std::isfinite(ev.loglik)) return std::nullopt;
  return ev;
}

struct Derivatives {
  VectorXd score;
  MatrixXd info;
  VectorXd py;
};

Derivatives derivatives(const ScoringProblem& prob, const Evaluation& ev, InformationKind kind) {
  const Eigen::Index n = prob.n();
  const int d = prob.dim();
  MatrixXd p = ev.llt.solve(MatrixXd::Identity(n, n));
  p.noalias() -= ev.sinv_x * ev.xtsx.solve(ev.sinv_x.transpose());
  p = 0.5 * (p + p.transpose());

  Derivatives out;
  out.py = p * prob.y;
  out.score = VectorXd::Zero(d);
  out.info = MatrixXd::Zero(d, d);

  if (kind == InformationKind::average) {
    MatrixXd dpy(n, d), pdpy(n, d);
    for (int j = 0; j < d; ++j) {
      if (!prob.is_free(j)) continue;
      double trace = 0.0;
      if (j == 0) {
        trace = p.diagonal().dot(prob.base);
        dpy.col(0) = prob.base.cwiseProduct(out.py);
      } else {
        const MatrixXd& k = *prob.kernels[static_cast<std::size_t>(j - 1)];
        const double inv = 1.0 / prob.scale[static_cast<std::size_t>(j - 1)];
        trace = inv * (p.array() * k.array()).sum();
        dpy.col(j).noalias() = inv * (k * out.py);
      }
      out.score[j] = -0.5 * trace + 0.5 * out.py.dot(dpy.col(j));
      pdpy.col(j).noalias() = p * dpy.col(j);
    }
    for (int j = 0; j < d; ++j) {
      if (!prob.is_free(j)) continue;
      for (int k = j; k < d; ++k) {
        if (!prob.is_free(k)) continue;
        const double v = 0.5 * dpy.col(j).dot(pdpy.col(k));
        out.info(j, k) = v;
        out.info(k, j) = v;
      }
    }
    return out;
  }

  std::vector<MatrixXd> pd(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    if (!prob.is_free(j)) continue;
    VectorXd d_py;
    if (j == 0) {
      pd[0] = p * prob.base.asDiagonal();
      d_py = prob.base.cwiseProduct(out.py);
    } else {
      const MatrixXd& k = *prob.kernels[static_cast<std::size_t>(j - 1)];
      const double inv = 1.0 / prob.scale[static_cast<std::size_t>(j - 1)];
      pd[j].noalias() = p * k;
      pd[j] *= inv;
      d_py = inv * (k * out.py);
    }
    out.score[j] = -0.5 * pd[j].trace() + 0.5 * out.py.dot(d_py);
  }
  for (int j = 0; j < d; ++j) {
    if (!prob.is_free(j)) continue;
    for (int k = j; k < d; ++k) {
      if (!prob.is_free(k)) continue;
      const double v = 0.5 * (pd[j].array() * pd[k].transpose().array()).sum();
      out.info(j, k) = v;
      out.info(k, j) = v;
    }
  }
  return out;
}

double projected_gradient(const ScoringProblem& prob, const VectorXd& theta, const VectorXd& score,
                          double sigma2_floor) {
  double g = 0.0;
  for (int j = 0; j < prob.dim(); ++j) {
    if (!prob.is_free(j)) continue;
    const bool boundary = j > 0 ? theta[j] <= 0.0 : theta[0] <= sigma2_floor;
    g = std::max(g, boundary ? std::max(score[j], 0.0) : std::abs(score[j]));
  }
  return g;
}

void clip(const ScoringProblem& prob, VectorXd& theta, double sigma2_floor) {
  if (prob.fixed_sigma2) theta[0] = 1.0;
  else theta[0] = std::max(theta[0], sigma2_floor);
  for (int j = 1; j < prob.dim(); ++j) theta[j] = std::max(theta[j], 0.0);
}

VectorXd newton_step(const MatrixXd& info, const VectorXd& score, const std::vector<int>& free) {
  const auto m = static_cast<Eigen::Index>(free.size());
  if (m == 0) return VectorXd::Zero(info.rows());
  MatrixXd a(m, m);
  VectorXd b(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    b[i] = score[free[static_cast<std::size_t>(i)]];
    for (Eigen::Index k = 0; k < m; ++k) {
      a(i, k) = info(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(k)]);
    }
  }
  Eigen::LDLT<MatrixXd> ldlt(a);
  VectorXd delta;
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && (ldlt.vectorD().array() > 1e-14 * a.trace()).all()) {
    delta = ldlt.solve(b);
  } else {
    // Near-collinear kernels: fall back to a ridge-stabilised step.
    MatrixXd ridge = a;
    ridge.diagonal().array() += 1e-8 * std::max(a.trace(), 1.0) / static_cast<double>(m);
    delta = ridge.ldlt().solve(b);
  }
  VectorXd full = VectorXd::Zero(info.rows());
  for (Eigen::Index i = 0; i < m; ++i) full[free[static_cast<std::size_t>(i)]] = delta[i];
  return full;
}

struct ScoringResult {
  VectorXd theta;
  VectorXd start;
  double loglik = -std::numeric_limits<double>::infinity();
  double gradient = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  bool valid = false;
  std::vector<double> trace;
  VectorXd py;
};

ScoringResult fisher_scoring(const ScoringProblem& prob, VectorXd theta, const RemlOptions& opt) {
  ScoringResult res;
  clip(prob, theta, opt.sigma2_floor);
  res.start = theta;
  auto ev = evaluate(prob, theta);
  if (!ev) return res;
  res.valid = true;
  res.trace.push_back(ev->loglik);

  for (int iter = 0;; ++iter) {
    const Derivatives der = derivatives(prob, *ev, opt.information);
    res.theta = theta;
    res.loglik = ev->loglik;
    res.py = der.py;
    res.iterations = iter;
    res.gradient = projected_gradient(prob, theta, der.score, opt.sigma2_floor);
    if (res.gradient < opt.tolerance) {
      res.converged = true;
      return res;
    }
    if (iter >= opt.max_iterations) return res;

    std::vector<int> free;
    for (int j = 0; j < prob.dim(); ++j) {
      if (!prob.is_free(j)) continue;
      const double lower = j == 0 ? opt.sigma2_floor : 0.0;
      if (theta[j] > lower || der.score[j] > 0.0) free.push_back(j);
    }
    const double slack = 1e-10 * std::max(1.0, std::abs(ev->loglik));
    auto line_search = [&](const VectorXd& delta) {
      double step = 1.0;
      for (int h = 0; h <= opt.max_halvings; ++h, step *= 0.5) {
        VectorXd cand = theta + step * delta;
        clip(prob, cand, opt.sigma2_floor);
        if (cand == theta) return false;
        auto cand_ev = evaluate(prob, cand);
        if (cand_ev && cand_ev->loglik >= ev->loglik - slack) {
          theta = cand;
          ev = std::move(cand_ev);
          return true;
        }
      }
      return false;
    };
    const VectorXd newton = newton_step(der.info, der.score, free);
    bool accepted = line_search(newton);
    if (!accepted && opt.information != InformationKind::expected) {
      const Derivatives exact = derivatives(prob, *ev, InformationKind::expected);
      accepted = line_search(newton_step(exact.info, exact.score, free));
    }
    if (!accepted) {
      // Diagonally scaled gradient ascent.
      VectorXd delta = VectorXd::Zero(prob.dim());
      for (int j : free) delta[j] = der.score[j] / std::max(der.info(j, j), 1e-12);
      accepted = line_search(delta);
    }
    if (!accepted) {
      // Stalled at rounding level: the predicted quadratic gain is negligible.
      res.converged = 0.5 * der.score.dot(newton) < 1e-9 * std::max(1.0, std::abs(ev->loglik));
      return res;
    }
    res.trace.push_back(ev->loglik);
  }
}

// One unconstrained scoring step from (sigma2 = 1, tau = 0): the MINQUE(0)-type moment estimate.
std::optional<VectorXd> moment_start(const ScoringProblem& prob, const RemlOptions& opt) {
  VectorXd theta0 = VectorXd::Zero(prob.dim());
  theta0[0] = 1.0;
  auto ev = evaluate(prob, theta0);
  if (!ev) return std::nullopt;
  const Derivatives der = derivatives(prob, *ev, InformationKind::expected);
  std::vector<int> free;
  for (int j = 0; j < prob.dim(); ++j) {
    if (prob.is_free(j)) free.push_back(j);
  }
  VectorXd theta = theta0 + newton_step(der.info, der.score, free);
  if (!theta.allFinite()) return std::nullopt;
  clip(prob, theta, opt.sigma2_floor);
  return theta;
}

struct MultiStartResult {
  ScoringResult best;
  std::vector<double> start_logliks;
};

MultiStartResult multi_start(const ScoringProblem& prob, const std::vector<VectorXd>& starts,
                             const RemlOptions& opt) {
  MultiStartResult out;
  bool have_converged = false;
  for (const auto& s : starts) {
    ScoringResult r = fisher_scoring(prob, s, opt);
    out.start_logliks.push_back(r.loglik);
    if (!r.valid) continue;
    const bool better = !out.best.valid || (r.converged && !have_converged) ||
                        (r.converged == have_converged && r.loglik > out.best.loglik);
    if (better) {
      have_converged = have_converged || r.converged;
      out.best = std::move(r);
    }
  }
  return out;
}

std::vector<VectorXd> grid_starts(const ScoringProblem& prob, const RemlOptions& opt) {
  std::vector<VectorXd> starts;
  for (double v : opt.start_grid) {
    if (!(v > 0.0 && v < 1.0)) {
      throw Error(ErrorCode::invalid_parameter, "start points must lie in (0, 1)");
    }
    VectorXd s = VectorXd::Constant(prob.dim(), v);
    if (prob.fixed_sigma2) s[0] = 1.0;
    starts.push_back(std::move(s));
  }
  if (opt.moment_start) {
    if (auto m = moment_start(prob, opt)) starts.push_back(std::move(*m));
  }
  if (starts.empty()) throw Error(ErrorCode::invalid_parameter, "no REML start points");
  return starts;
}

void validate_inputs(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                     const std::vector<EffectTerm>& terms) {
  if (terms.empty()) throw Error(ErrorCode::invalid_parameter, "REML needs at least one term");
  if (X.rows() != y.size() || family.subjects() != y.size()) {
    throw Error(ErrorCode::dimension_mismatch, "y, X and the kernels disagree on n");
  }
  require_full_rank(X);
  for (const auto& t : terms) (void)family.gram(t);
}

ScoringProblem make_problem(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                            const std::vector<EffectTerm>& terms, VectorXd base, bool fixed_sigma2) {
  ScoringProblem prob{y, X, {}, {}, std::move(base), fixed_sigma2};
  for (const auto& t : terms) {
    const MatrixXd& k = family.gram(t);
    const double mean_diag = k.diagonal().mean();
    prob.kernels.push_back(&k);
    prob.scale.push_back(mean_diag > 0.0 ? mean_diag : 1.0);
  }
  return prob;
}

VarianceComponents unscale(const ScoringProblem& prob, const VectorXd& theta, double y_var,
                           const std::vector<EffectTerm>& terms) {
  VarianceComponents vc;
  vc.sigma2 = theta[0] * y_var;
  vc.terms = terms;
  for (std::size_t t = 0; t < terms.size(); ++t) {
    vc.taus.push_back(theta[static_cast<Eigen::Index>(t) + 1] * y_var / prob.scale[t]);
  }
  return vc;
}

double restricted_loglik_impl(const VarianceComponents& theta, const VectorXd& y, const MatrixXd& X,
                              const KernelFamily& family, const VectorXd& base) {
  if (X.rows() != y.size() || family.subjects() != y.size()) {
    throw Error(ErrorCode::dimension_mismatch, "y, X and the kernels disagree on n");
  }
  ScoringProblem prob = make_problem(y, X, family, theta.terms, base, false);
  VectorXd vec(prob.dim());
  vec[0] = theta.sigma2;
  for (std::size_t t = 0; t < theta.terms.size(); ++t) {
    vec[static_cast<Eigen::Index>(t) + 1] = theta.taus[t] * prob.scale[t];
  }
  auto ev = evaluate(prob, vec);
  if (!ev) throw Error(ErrorCode::not_positive_definite, "covariance is not positive definite");
  return ev->loglik;
}

}  // namespace

double restricted_loglik(const VarianceComponents& theta, const VectorXd& y, const MatrixXd& X,
                         const KernelFamily& family) {
  return restricted_loglik_impl(theta, y, X, family, VectorXd::Ones(y.size()));
}

double restricted_loglik(const VarianceComponents& theta, const VectorXd& y, const MatrixXd& X,
                         const KernelFamily& family, const VectorXd& base_variance) {
  return restricted_loglik_impl(theta, y, X, family, base_variance);
}

RemlFit reml_fit(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                 const std::vector<EffectTerm>& terms, const RemlOptions& options) {
  validate_inputs(y, X, family, terms);
  const Eigen::Index n = y.size();
  const double dof = static_cast<double>(n - X.cols());

  // Standardise y by its OLS residual variance so the start grid is scale-free.
  const VectorXd ols_resid = y - X * X.colPivHouseholderQr().solve(y);
  const double y_var = ols_resid.squaredNorm() / dof;
  if (!(y_var > 0.0)) {
    throw Error(ErrorCode::degenerate_distribution, "response is fully explained by the covariates");
  }
  const VectorXd ys = y / std::sqrt(y_var);
  ScoringProblem prob = make_problem(ys, X, family, terms, VectorXd::Ones(n), false);

  MultiStartResult ms = multi_start(prob, grid_starts(prob, options), options);
  if (!ms.best.valid) {
    throw Error(ErrorCode::not_positive_definite, "no start point gives a positive definite covariance");
  }
  // Undo the standardisation: Sigma scales by y_var, so l_R shifts by -(n - q)/2 ln(y_var).
  const double shift = -0.5 * dof * std::log(y_var);

  RemlFit fit;
  fit.theta = unscale(prob, ms.best.theta, y_var, terms);
  fit.restricted_loglik = ms.best.loglik + shift;
  fit.gradient_norm = ms.best.gradient;
  fit.iterations = ms.best.iterations;
  fit.start_point_used.assign(ms.best.start.data(), ms.best.start.data() + ms.best.start.size());
  fit.converged = ms.best.converged;
  fit.sigma2_at_floor = ms.best.theta[0] <= options.sigma2_floor;
  fit.working_response = y;
  fit.base_variance = VectorXd::Ones(n);
  for (double v : ms.best.trace) fit.loglik_trace.push_back(v + shift);
  for (double v : ms.start_logliks) fit.start_logliks.push_back(v + shift);
  if (!fit.converged) {
    throw RemlNoConvergence("Fisher scoring did not converge from any start (projected score " +
                                std::to_string(fit.gradient_norm) + ")",
                            fit);
  }
  return fit;
}

RemlFit reml_fit(const VectorXd& y, const MatrixXd& X, const KernelFamily& family,
                 const std::vector<EffectTerm>& terms, const Family& response_family,
                 const RemlOptions& options) {
  if (response_family.is_gaussian() && !response_family.prior_weights) {
    return reml_fit(y, X, family, terms, options);
  }
  if (response_family.is_gaussian()) {
    throw Error(ErrorCode::invalid_parameter, "prior weights are only supported for binomial and poisson REML");
  }
  validate_inputs(y, X, family, terms);
  const Eigen::Index n = y.size();
  const NullModelFit glm = fit_null_glm(y, X, response_family);
  const VectorXd prior = response_family.weights(n);

  VectorXd eta = glm.eta_hat;
  VectorXd theta_prev;
  RemlFit fit;
  for (int outer = 0; outer < options.max_outer_iterations; ++outer) {
    const VectorXd mu = inverse_link(response_family, eta);
    const VectorXd v = variance_function(response_family, mu);
    if ((v.array() <= 0.0).any()) {
      throw Error(ErrorCode::separation, "working weights vanish during the working-response update");
    }
    const VectorXd working = eta + ((y - mu).array() / v.array()).matrix();
    const VectorXd base = (1.0 / (v.array() * prior.array())).matrix();
    ScoringProblem prob = make_problem(working, X, family, terms, base, true);

    std::vector<VectorXd> starts;
    if (outer == 0) starts = grid_starts(prob, options);
    else starts.push_back(theta_prev);
    MultiStartResult ms = multi_start(prob, starts, options);
    if (!ms.best.valid) {
      throw Error(ErrorCode::not_positive_definite, "working covariance is not positive definite");
    }

    fit.theta = unscale(prob, ms.best.theta, 1.0, terms);
    fit.restricted_loglik = ms.best.loglik;
    fit.gradient_norm = ms.best.gradient;
    fit.iterations += ms.best.iterations;
    if (outer == 0) {
      fit.start_point_used.assign(ms.best.start.data(), ms.best.start.data() + ms.best.start.size());
      fit.start_logliks = ms.start_logliks;
    }
    fit.loglik_trace = ms.best.trace;
    fit.working_response = working;
    fit.base_variance = base;
    fit.sigma2_fixed = true;
    fit.outer_iterations = outer + 1;
    fit.converged = ms.best.converged;

    // eta = X beta + sum_t tau_t K_t P y~ = y~ - R P y~.
    eta = working - base.cwiseProduct(ms.best.py);
    if (!eta.allFinite()) throw Error(ErrorCode::no_convergence, "working response diverged");

    if (outer > 0) {
      const VectorXd diff = (ms.best.theta - theta_prev).cwiseAbs();
      const VectorXd tol = options.outer_tolerance * (1.0 + theta_prev.cwiseAbs().array()).matrix();
      if ((diff.array() <= tol.array()).all()) {
        if (!fit.converged) {
          throw RemlNoConvergence("Fisher scoring did not converge on the working model", fit);
        }
        return fit;
      }
    }
    theta_prev = ms.best.theta;
  }
  fit.converged = false;
  throw RemlNoConvergence("working-response iterations did not settle in " +
                              std::to_string(options.max_outer_iterations) + " rounds",
                          fit);
}

}  // namespace mvkm
