#include "mvkm/simulation.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
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

SimConfig small_config() {
  SimConfig cfg;
  cfg.n = 60;
  cfg.m = 3;
  cfg.alphas = {0.02, 0.0, 0.5};
  cfg.beta = {0.0, 0.5, 0.5};
  cfg.seed = 42;
  return cfg;
}

}  // namespace

TEST_CASE("generator shapes and determinism") {
  const SimConfig cfg = small_config();
  const MultiViewDataset a = generate_synthetic(cfg);
  const MultiViewDataset b = generate_synthetic(cfg);
  REQUIRE(a.views.size() == 3);
  CHECK(a.subjects() == 60);
  CHECK(a.covariates.cols() == 3);
  CHECK((a.covariates.col(0).array() == 1.0).all());
  CHECK((a.y.array() == b.y.array()).all());
  for (std::size_t v = 0; v < 3; ++v) CHECK((a.views[v].data.array() == b.views[v].data.array()).all());
  for (double y : a.y) CHECK((y == 0.0 || y == 1.0));
  CHECK(a.views[0].kind == ViewKind::genotype);
  for (double g : a.views[0].data.reshaped()) CHECK((g == 0.0 || g == 1.0 || g == 2.0));
  CHECK(a.views[1].features() == 10);

  const MultiViewDataset r0 = generate_replicate(cfg, 0);
  const MultiViewDataset r1 = generate_replicate(cfg, 1);
  CHECK(!(r0.y.array() == r1.y.array()).all());
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("null generator mean") {
  SimConfig cfg;
  cfg.n = 4000;
  cfg.m = 2;
  cfg.alphas = {0.0, 0.0};
  cfg.beta = {0.0, 0.0, 0.0};
  cfg.seed = 3;
  CHECK(generate_synthetic(cfg).y.mean() == doctest::Approx(0.5).epsilon(0.06));
}

TEST_CASE("config validation") {
  SimConfig cfg = small_config();
  cfg.n = 1;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::invalid_parameter);
  cfg = small_config();
  cfg.beta = {1.0};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_config();
  CHECK(cfg.alpha(3) == 0.5);
  CHECK(cfg.alpha(2) == 0.0);
}

TEST_CASE("gaussian response simulation") {
  const MatrixXd x = MatrixXd::Ones(3000, 1);
  const VectorXd y = simulate_gaussian_response(x, VectorXd::Constant(1, 2.0), 4.0 * MatrixXd::Identity(3000, 3000), 1);
  CHECK(y.mean() == doctest::Approx(2.0).epsilon(0.05));
  const double var = (y.array() - y.mean()).square().sum() / 2999.0;
  CHECK(var == doctest::Approx(4.0).epsilon(0.08));
}

TEST_CASE("ROC AUC") {
  const std::vector<double> p{0.01, 0.02, 0.5, 0.9};
  CHECK(roc_auc(p, {true, true, false, false}) == 1.0);
  CHECK(roc_auc(p, {false, false, true, true}) == 0.0);
  const std::vector<double> tie{0.3, 0.3};
  CHECK(roc_auc(tie, {true, false}) == 0.5);
  CHECK(roc_auc(p, {true, false, true, false}) == doctest::Approx(0.75));
  CHECK(code_of([&] { roc_auc(p, {true, true, true, true}); }) == ErrorCode::invalid_roc);
  CHECK(code_of([&] { roc_auc(p, {true, false}); }) == ErrorCode::dimension_mismatch);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  std::vector<double> rp(2000);
  std::vector<bool> labels(2000);
  for (std::size_t i = 0; i < rp.size(); ++i) {
    rp[i] = u(rng);
    labels[i] = u(rng) < 0.5;
  }
  CHECK(std::abs(roc_auc(rp, labels) - 0.5) < 0.05);

  const auto pts = roc_points(p, {true, false, true, false}, 0.25);
  REQUIRE(pts.size() == 5);
  CHECK(pts.front().threshold == 0.0);
  CHECK(pts.back().tpr == 1.0);
  CHECK(pts.back().fpr == 1.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    CHECK(pts[i].tpr >= pts[i - 1].tpr);
    CHECK(pts[i].fpr >= pts[i - 1].fpr);
  }
}

TEST_CASE("randomised ROC alphas") {
  RocConfig cfg;
  cfg.base = small_config();
  cfg.randomized_orders = {2, 3};
  int zero = 0;
  for (std::uint64_t i = 0; i < 400; ++i) {
    const auto a = roc_alphas(cfg, i);
    REQUIRE(a.size() == 3);
    CHECK(a[0] == 0.02);
    CHECK(a[2] >= 0.0);
    CHECK(a[2] <= 1.0);
    zero += a[2] == 0.0 ? 1 : 0;
    CHECK(a == roc_alphas(cfg, i));
  }
  CHECK(zero > 150);
  CHECK(zero < 250);
}

TEST_CASE("PCA regression baseline") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  const Eigen::Index n = 300;
  // Two views sharing one latent direction; y depends on its square.
  VectorXd f(n);
  for (auto& v : f) v = z(rng);
  std::vector<ViewMatrix> views(2);
  for (int v = 0; v < 2; ++v) {
    views[v].view_id = v;
    views[v].data.resize(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < 4; ++j) views[v].data(i, j) = f[i] + 0.05 * z(rng);
    }
  }
  const MatrixXd x = MatrixXd::Ones(n, 1);
  VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = f[i] * f[i] + 0.3 * z(rng);
  const PcaRegressionResult r = pca_regression_test(y, x, views, 0.8, Family::gaussian());
  CHECK(r.components == 1);
  CHECK(r.product_columns == 1);
  CHECK(r.p_value < 1e-6);

  VectorXd noise(n);
  for (auto& v : noise) v = z(rng);
  const PcaRegressionResult nr = pca_regression_test(noise, x, views, 0.8, Family::gaussian());
  CHECK(nr.p_value > 1e-3);
  CHECK(nr.statistic >= 0.0);
}

TEST_CASE("method p-values and replicate runs") {
  const SimConfig cfg = small_config();
  const MultiViewDataset d = generate_synthetic(cfg);
  const KernelFamily fam = build_family(d.views, default_kernels(d.views), 3);
  for (Method m : {Method::composite, Method::overall, Method::marginal_skat, Method::pca_partial, Method::pca_full}) {
    const double p = method_pvalue(m, d, fam, Family::binomial());
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(parse_method(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_method("lasso"), Error);

  SimConfig small = cfg;
  small.replicates = 4;
  const std::vector<Method> methods{Method::overall, Method::marginal_skat};
  const auto one = run_replicates(small, methods, 1);
  const auto four = run_replicates(small, methods, 4);
  REQUIRE(one.size() == 4);
  for (std::size_t r = 0; r < one.size(); ++r) {
    for (std::size_t k = 0; k < methods.size(); ++k) CHECK(one[r].p_values[k] == four[r].p_values[k]);
  }
}

TEST_CASE("power study bookkeeping") {
  SimConfig cfg = small_config();
  cfg.replicates = 6;
  const auto rows = power_study({cfg}, {Method::overall}, 0.05, 2);
  REQUIRE(rows.size() == 1);
  const PowerRow& r = rows[0];
  CHECK(r.replicates == 6);
  CHECK(r.rejection_rate == doctest::Approx(r.rejections / 6.0));
  CHECK(r.ci_low <= r.rejection_rate);
  CHECK(r.ci_high >= r.rejection_rate);
  CHECK(power_table_tsv(rows).find('\t') != std::string::npos);
}
