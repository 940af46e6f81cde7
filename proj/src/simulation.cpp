#include "mvkm/simulation.hpp"

#include "mvkm/parallel.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <sstream>

namespace mvkm {

double SimConfig::alpha(int order) const {
  if (order < 1 || order > static_cast<int>(alphas.size())) return 0.0;
  return alphas[static_cast<std::size_t>(order - 1)];
}

void SimConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_parameter, msg); };
  if (n < 20) fail("simulation needs n >= 20");
  if (m < 1 || m > 16) fail("simulation needs 1 <= m <= 16");
  if (replicates < 1) fail("simulation needs at least one replicate");
  if (!(noise_sd > 0.0)) fail("noise_sd must be positive");
  if (features_per_view < 1) fail("features_per_view must be positive");
  if (covariate_dim < 1) fail("covariate_dim must include the intercept");
  if (static_cast<int>(beta.size()) != covariate_dim) fail("beta needs one entry per covariate column");
  if (static_cast<int>(alphas.size()) > m) fail("more alphas than orders");
  for (double a : alphas) {
    if (!(a >= 0.0)) fail("alphas must be nonnegative");
  }
  for (int g : genotype_views) {
    if (g < 0 || g >= m) fail("genotype view index out of range");
  }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

double expit(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

bool is_genotype(const SimConfig& cfg, int view) {
  return std::find(cfg.genotype_views.begin(), cfg.genotype_views.end(), view) != cfg.genotype_views.end();
}

}  // namespace

MultiViewDataset generate_synthetic(const SimConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int n = cfg.n;
  const int p = cfg.features_per_view;

  MultiViewDataset data;
  data.covariates.resize(n, cfg.covariate_dim);
  for (int i = 0; i < n; ++i) {
    data.covariates(i, 0) = 1.0;
    for (int j = 1; j < cfg.covariate_dim; ++j) data.covariates(i, j) = normal(rng);
  }

  std::vector<MatrixXd> standardized;
  for (int v = 0; v < cfg.m; ++v) {
    ViewMatrix view;
    view.view_id = v;
    view.data.resize(n, p);
    const bool geno = is_genotype(cfg, v);
    view.kind = geno ? ViewKind::genotype : ViewKind::numeric;
    for (int j = 0; j < p; ++j) {
      for (int i = 0; i < n; ++i) {
        if (geno) {
          const double u = unif(rng);
          view.data(i, j) = u < 0.25 ? 0.0 : (u < 0.75 ? 1.0 : 2.0);
        } else {
          view.data(i, j) = normal(rng);
        }
      }
    }
    standardized.push_back(geno ? MatrixXd((view.data.array() - 1.0) / std::sqrt(0.5)) : view.data);
    data.views.push_back(std::move(view));
  }

  VectorXd eta = data.covariates * Eigen::Map<const VectorXd>(cfg.beta.data(), cfg.covariate_dim);
  std::vector<VectorXd> view_score;
  for (int v = 0; v < cfg.m; ++v) {
    const double a1 = cfg.alpha(1);
    if (a1 != 0.0) eta += a1 * standardized[v].array().cos().rowwise().sum().matrix();
    view_score.push_back(standardized[v].rowwise().sum() / std::sqrt(static_cast<double>(p)));
  }
  for (const auto& term : all_terms(cfg.m, cfg.m)) {
    if (term.order() < 2) continue;
    const double a = cfg.alpha(static_cast<int>(term.order()));
    if (a == 0.0) continue;
    VectorXd h = VectorXd::Ones(n);
    for (int v : term.views()) h.array() *= view_score[static_cast<std::size_t>(v)].array();
    eta += a * h;
  }
  for (int i = 0; i < n; ++i) eta[i] += cfg.noise_sd * normal(rng);

  data.y.resize(n);
  for (int i = 0; i < n; ++i) data.y[i] = unif(rng) < expit(eta[i]) ? 1.0 : 0.0;
  for (int i = 0; i < n; ++i) data.subject_ids.push_back("S" + std::to_string(i + 1));
  return data;
}

MultiViewDataset generate_replicate(const SimConfig& cfg, std::uint64_t index) {
  SimConfig c = cfg;
  c.seed = derive_seed(cfg.seed, index);
  return generate_synthetic(c);
}

std::vector<KernelSpec> default_kernels(const std::vector<ViewMatrix>& views) {
  std::vector<KernelSpec> specs;
  for (const auto& v : views) specs.push_back(KernelSpec::default_for(v.kind));
  return specs;
}

std::string_view to_string(KernelChoice choice) {
  return choice == KernelChoice::defaults ? "defaults" : "linear_standardized";
}

KernelChoice parse_kernel_choice(std::string_view name) {
  for (KernelChoice c : {KernelChoice::defaults, KernelChoice::linear_standardized}) {
    if (to_string(c) == name) return c;
  }
  throw Error(ErrorCode::config_error, "kernel choice '" + std::string(name) + "' is not defaults or linear_standardized");
}

VectorXd simulate_gaussian_response(const MatrixXd& X, const VectorXd& beta, const MatrixXd& sigma,
                                    std::uint64_t seed) {
  Eigen::LLT<MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::not_positive_definite, "simulation covariance is not positive definite");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd z(sigma.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  return X * beta + llt.matrixL() * z;
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::composite: return "composite";
    case Method::overall: return "overall";
    case Method::marginal_skat: return "marginal_skat";
    case Method::pca_partial: return "pca_partial";
    case Method::pca_full: return "pca_full";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::composite, Method::overall, Method::marginal_skat, Method::pca_partial,
                   Method::pca_full}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::config_error, "unknown method '" + std::string(name) + "'");
}

PcaRegressionResult pca_regression_test(const VectorXd& y, const MatrixXd& X,
                                        std::span<const ViewMatrix> views, double variance_kept,
                                        const Family& family, int max_components) {
  if (!(variance_kept > 0.0 && variance_kept <= 1.0)) {
    throw Error(ErrorCode::invalid_parameter, "variance_kept must lie in (0, 1]");
  }
  if (views.empty() || max_components < 1) {
    throw Error(ErrorCode::invalid_parameter, "PCA regression needs views and max_components >= 1");
  }
  const Eigen::Index n = y.size();
  Eigen::Index cols = 0;
  for (const auto& v : views) cols += v.features();
  MatrixXd z(n, cols);
  Eigen::Index c = 0;
  for (const auto& v : views) {
    if (v.subjects() != n) throw Error(ErrorCode::dimension_mismatch, "view row count differs from y");
    z.middleCols(c, v.features()) = v.data;
    c += v.features();
  }
  // Centre and scale columns; constant columns carry no variance and are dropped.
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < cols; ++j) {
    z.col(j).array() -= z.col(j).mean();
    const double sd = std::sqrt(z.col(j).squaredNorm() / static_cast<double>(n - 1));
    if (sd > 1e-12) {
      z.col(j) /= sd;
      keep.push_back(j);
    }
  }
  if (keep.empty()) throw Error(ErrorCode::singular_design, "views have no variance");
  MatrixXd zk(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) zk.col(static_cast<Eigen::Index>(j)) = z.col(keep[j]);

  Eigen::BDCSVD<MatrixXd> svd(zk, Eigen::ComputeThinU);
  const VectorXd& s = svd.singularValues();
  const VectorXd var = s.array().square();
  const double total = var.sum();
  Eigen::Index rank = 0;
  while (rank < s.size() && s[rank] > 1e-9 * s[0]) ++rank;
  Eigen::Index k = 0;
  double acc = 0.0;
  while (k < rank) {
    acc += var[k];
    ++k;
    if (acc >= variance_kept * total * (1.0 - 1e-12)) break;
  }
  k = std::min<Eigen::Index>(std::max<Eigen::Index>(k, 1), max_components);

  const MatrixXd scores = svd.matrixU().leftCols(k) * s.head(k).asDiagonal();
  const Eigen::Index n_prod = k * (k + 1) / 2;
  MatrixXd null_design(n, X.cols() + k);
  null_design << X, scores;
  MatrixXd alt_design(n, X.cols() + k + n_prod);
  alt_design.leftCols(X.cols() + k) = null_design;
  Eigen::Index col = X.cols() + k;
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = a; b < k; ++b) alt_design.col(col++) = scores.col(a).cwiseProduct(scores.col(b));
  }

  const NullModelFit null_fit = fit_null_glm(y, null_design, family);
  const NullModelFit alt_fit = fit_null_glm(y, alt_design, family);
  PcaRegressionResult out;
  out.components = static_cast<int>(k);
  out.product_columns = static_cast<int>(n_prod);
  out.statistic = std::max(0.0, 2.0 * (alt_fit.loglik - null_fit.loglik));
  out.p_value = out.statistic > 0.0
                    ? std::clamp(boost::math::gamma_q(0.5 * static_cast<double>(n_prod), 0.5 * out.statistic),
                                 1e-300, 1.0)
                    : 1.0;
  return out;
}

double method_pvalue(Method method, const MultiViewDataset& data, const KernelFamily& family,
                     const Family& response_family, const MethodOptions& options) {
  const int m = static_cast<int>(data.views.size());
  switch (method) {
    case Method::composite: {
      std::vector<int> all(static_cast<std::size_t>(m));
      for (int v = 0; v < m; ++v) all[static_cast<std::size_t>(v)] = v;
      return composite_test(data.y, data.covariates, family, EffectTerm(all), response_family, std::nullopt,
                            options.reml, options.composite_variance)
          .p_value;
    }
    case Method::overall: return overall_test(data.y, data.covariates, family, response_family).p_value;
    case Method::marginal_skat: {
      const ScoreTestNull null(data.y, data.covariates, response_family);
      double best = 1.0;
      for (int v = 0; v < m; ++v) {
        best = std::min(best, null.test(family.gram(EffectTerm{v}), TestKind::marginal, EffectTerm{v}).p_value);
      }
      return std::min(1.0, best * m);
    }
    case Method::pca_partial:
      return pca_regression_test(data.y, data.covariates, data.views, options.pca_partial_variance,
                                 response_family, options.pca_max_components)
          .p_value;
    case Method::pca_full:
      return pca_regression_test(data.y, data.covariates, data.views, 1.0, response_family,
                                 options.pca_max_components)
          .p_value;
  }
  throw Error(ErrorCode::invalid_parameter, "unknown method");
}

namespace {

int family_order_needed(const std::vector<Method>& methods, int m) {
  for (Method me : methods) {
    if (me == Method::composite || me == Method::overall) return m;
  }
  return 1;
}

ReplicateOutcome evaluate_methods(const MultiViewDataset& data, const std::vector<Method>& methods,
                                  const MethodOptions& options) {
  ReplicateOutcome out;
  out.p_values.assign(methods.size(), std::numeric_limits<double>::quiet_NaN());
  out.errors.assign(methods.size(), "");
  const int m = static_cast<int>(data.views.size());
  KernelFamily family;
  std::string family_error;
  try {
    std::vector<KernelSpec> specs = default_kernels(data.views);
    if (options.kernels == KernelChoice::linear_standardized) {
      std::fill(specs.begin(), specs.end(), KernelSpec::linear(true));
    }
    family = build_family(data.views, specs, family_order_needed(methods, m));
  } catch (const std::exception& e) {
    family_error = e.what();
  }
  for (std::size_t k = 0; k < methods.size(); ++k) {
    const bool needs_family = methods[k] != Method::pca_partial && methods[k] != Method::pca_full;
    if (needs_family && !family_error.empty()) {
      out.errors[k] = family_error;
      continue;
    }
    try {
      out.p_values[k] = method_pvalue(methods[k], data, family, Family::binomial(), options);
    } catch (const std::exception& e) {
      out.errors[k] = e.what();
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string alpha_label(const std::vector<double>& alphas, int m) {
  std::string s = "(";
  for (int k = 1; k <= m; ++k) {
    if (k > 1) s += ", ";
    s += fmt(k <= static_cast<int>(alphas.size()) ? alphas[static_cast<std::size_t>(k - 1)] : 0.0);
  }
  return s + ")";
}

}  // namespace

std::vector<ReplicateOutcome> run_replicates(const SimConfig& cfg, const std::vector<Method>& methods,
                                             int workers, const MethodOptions& options) {
  cfg.validate();
  std::vector<ReplicateOutcome> out(static_cast<std::size_t>(cfg.replicates));
  parallel_for(out.size(), workers, [&](std::size_t r) {
    out[r] = evaluate_methods(generate_replicate(cfg, r), methods, options);
  });
  return out;
}

std::vector<PowerRow> power_study(const std::vector<SimConfig>& grid, const std::vector<Method>& methods,
                                  double nominal_level, int workers, const MethodOptions& options) {
  if (grid.empty()) throw Error(ErrorCode::invalid_parameter, "power study needs at least one setting");
  if (methods.empty()) throw Error(ErrorCode::invalid_parameter, "power study needs at least one method");
  if (!(nominal_level > 0.0 && nominal_level < 1.0)) {
    throw Error(ErrorCode::invalid_parameter, "nominal level must lie in (0, 1)");
  }
  std::vector<PowerRow> rows;
  for (const auto& cfg : grid) {
    const auto outcomes = run_replicates(cfg, methods, workers, options);
    for (std::size_t k = 0; k < methods.size(); ++k) {
      PowerRow row;
      row.n = cfg.n;
      row.m = cfg.m;
      row.alphas = cfg.alphas;
      row.alphas.resize(static_cast<std::size_t>(cfg.m), 0.0);
      row.method = methods[k];
      row.replicates = cfg.replicates;
      row.nominal_level = nominal_level;
      for (const auto& o : outcomes) {
        const double p = o.p_values[k];
        if (std::isnan(p)) ++row.failures;
        else if (p <= nominal_level) ++row.rejections;
      }
      const double r = static_cast<double>(row.replicates);
      row.rejection_rate = row.rejections / r;
      const double z = 1.959963984540054;
      const double denom = 1.0 + z * z / r;
      const double centre = (row.rejection_rate + z * z / (2.0 * r)) / denom;
      const double half =
          z * std::sqrt(row.rejection_rate * (1.0 - row.rejection_rate) / r + z * z / (4.0 * r * r)) / denom;
      row.ci_low = std::clamp(centre - half, 0.0, row.rejection_rate);
      row.ci_high = std::clamp(centre + half, row.rejection_rate, 1.0);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string power_table_tsv(const std::vector<PowerRow>& rows) {
  std::ostringstream out;
  out << "n\tm\talphas\tmethod\treplicates\trejections\tfailures\tnominal_level\trejection_rate\tci_low\tci_high\n";
  for (const auto& r : rows) {
    out << r.n << '\t' << r.m << '\t' << alpha_label(r.alphas, r.m) << '\t' << to_string(r.method) << '\t'
        << r.replicates << '\t' << r.rejections << '\t' << r.failures << '\t' << fmt(r.nominal_level) << '\t'
        << fmt(r.rejection_rate) << '\t' << fmt(r.ci_low) << '\t' << fmt(r.ci_high) << '\n';
  }
  return out.str();
}

std::vector<RocPoint> roc_points(std::span<const double> p_values, const std::vector<bool>& labels,
                                 double step) {
  if (p_values.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "one label per p-value");
  if (!(step > 0.0 && step <= 1.0)) throw Error(ErrorCode::invalid_parameter, "threshold step must lie in (0, 1]");
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(p_values[i]);
  if (pos.empty() || neg.empty()) {
    throw Error(ErrorCode::invalid_roc, "ROC needs both positive and negative replicates");
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  const auto steps = static_cast<long>(std::llround(1.0 / step));
  std::vector<RocPoint> points;
  points.reserve(static_cast<std::size_t>(steps + 1));
  for (long s = 0; s <= steps; ++s) {
    const double t = std::min(1.0, static_cast<double>(s) * step);
    const auto tp = std::upper_bound(pos.begin(), pos.end(), t) - pos.begin();
    const auto fp = std::upper_bound(neg.begin(), neg.end(), t) - neg.begin();
    points.push_back({t, static_cast<double>(fp) / static_cast<double>(neg.size()),
                      static_cast<double>(tp) / static_cast<double>(pos.size())});
  }
  return points;
}

double roc_auc(std::span<const double> p_values, const std::vector<bool>& labels) {
  if (p_values.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "one label per p-value");
  double wins = 0.0;
  std::size_t npos = 0, nneg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    ++npos;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[j]) continue;
      if (p_values[i] < p_values[j]) wins += 1.0;
      else if (p_values[i] == p_values[j]) wins += 0.5;
    }
  }
  for (bool l : labels) nneg += l ? 0 : 1;
  if (npos == 0 || nneg == 0) throw Error(ErrorCode::invalid_roc, "AUC needs both classes");
  return wins / (static_cast<double>(npos) * static_cast<double>(nneg));
}

std::vector<double> roc_alphas(const RocConfig& cfg, std::uint64_t index) {
  std::vector<double> alphas = cfg.base.alphas;
  alphas.resize(static_cast<std::size_t>(cfg.base.m), 0.0);
  std::mt19937_64 rng(derive_seed(derive_seed(cfg.base.seed, index), 0xA1FA));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int order : cfg.randomized_orders) {
    if (order < 1 || order > cfg.base.m) throw Error(ErrorCode::invalid_parameter, "randomised order out of range");
    const bool zero = unif(rng) < cfg.null_probability;
    const double draw = unif(rng);
    alphas[static_cast<std::size_t>(order - 1)] = zero ? 0.0 : cfg.alpha_upper * (1.0 - draw);
  }
  return alphas;
}

std::vector<RocCurve> roc_curve(const RocConfig& cfg, const std::vector<Method>& methods, int workers,
                                const MethodOptions& options) {
  cfg.base.validate();
  if (methods.empty()) throw Error(ErrorCode::invalid_parameter, "ROC needs at least one method");
  const int label_order = cfg.label_order == 0 ? cfg.base.m : cfg.label_order;
  const auto reps = static_cast<std::size_t>(cfg.base.replicates);
  std::vector<ReplicateOutcome> outcomes(reps);
  std::vector<bool> labels(reps);
  for (std::size_t r = 0; r < reps; ++r) {
    labels[r] = roc_alphas(cfg, r)[static_cast<std::size_t>(label_order - 1)] > 0.0;
  }
  if (std::all_of(labels.begin(), labels.end(), [](bool b) { return b; }) ||
      std::none_of(labels.begin(), labels.end(), [](bool b) { return b; })) {
    throw Error(ErrorCode::invalid_roc, "randomised alphas produced a single label class");
  }
  parallel_for(reps, workers, [&](std::size_t r) {
    SimConfig c = cfg.base;
    c.alphas = roc_alphas(cfg, r);
    c.seed = derive_seed(cfg.base.seed, r);
    outcomes[r] = evaluate_methods(generate_synthetic(c), methods, options);
  });

  std::vector<RocCurve> curves;
  for (std::size_t k = 0; k < methods.size(); ++k) {
    RocCurve curve;
    curve.method = methods[k];
    std::vector<double> p(reps);
    for (std::size_t r = 0; r < reps; ++r) {
      p[r] = outcomes[r].p_values[k];
      if (std::isnan(p[r])) {
        ++curve.failures;
        p[r] = 1.0;
      }
      (labels[r] ? curve.positives : curve.negatives) += 1;
    }
    curve.points = roc_points(p, labels, cfg.threshold_step);
    curve.auc = roc_auc(p, labels);
    curves.push_back(std::move(curve));
  }
  return curves;
}

std::string roc_table_tsv(const std::vector<RocCurve>& curves) {
  std::ostringstream out;
  out << "method\tthreshold\tfpr\ttpr\n";
  for (const auto& c : curves) {
    for (const auto& pt : c.points) {
      out << to_string(c.method) << '\t' << fmt(pt.threshold) << '\t' << fmt(pt.fpr) << '\t' << fmt(pt.tpr) << '\n';
    }
  }
  return out.str();
}

}  // namespace mvkm
