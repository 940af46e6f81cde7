#include "mvkm/inference.hpp"
#include "mvkm/simulation.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace mvkm;

namespace {

MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = z(rng);
  }
  return m;
}

struct Instance {
  VectorXd y;
  MatrixXd x;
  std::vector<ViewMatrix> views;
  KernelFamily family;
};

Instance gaussian_instance(Eigen::Index n, int m, std::uint64_t seed, int max_order) {
  std::mt19937_64 rng(seed);
  Instance in;
  in.x = random_matrix(n, 2, rng);
  in.x.col(0).setOnes();
  for (int v = 0; v < m; ++v) in.views.push_back({random_matrix(n, 3, rng), ViewKind::numeric, v});
  in.family = build_family(in.views, std::vector<KernelSpec>(static_cast<std::size_t>(m), KernelSpec::gaussian()),
                           max_order);
  in.y = random_matrix(n, 1, rng);
  return in;
}

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

}  // namespace

TEST_CASE("quadratic form moments") {
  const Moments id = quadratic_form_moments(MatrixXd::Identity(5, 5), MatrixXd::Identity(5, 5));
  CHECK(id.mean == doctest::Approx(5.0));
  CHECK(id.variance == doctest::Approx(10.0));
  Eigen::VectorXd a(3);
  a << 0.5, 2.0, -1.0;
  const Moments d = quadratic_form_moments(a.asDiagonal().toDenseMatrix(), MatrixXd::Identity(3, 3));
  CHECK(d.mean == doctest::Approx(1.5));
  CHECK(d.variance == doctest::Approx(2.0 * 5.25));
  CHECK(code_of([] { quadratic_form_moments(MatrixXd::Identity(3, 3), MatrixXd::Identity(4, 4)); }) ==
        ErrorCode::dimension_mismatch);
}

TEST_CASE("Satterthwaite moment matching") {
  auto sc = satterthwaite(7.0, 14.0);
  CHECK(sc.scale == doctest::Approx(1.0));
  CHECK(sc.df == doctest::Approx(7.0));
  sc = satterthwaite(2.0, 4.0);
  CHECK(sc.scale == doctest::Approx(1.0));
  CHECK(sc.df == doctest::Approx(2.0));
  sc = satterthwaite(3.0, 3.0);
  CHECK(sc.scale == doctest::Approx(0.5));
  CHECK(sc.df == doctest::Approx(6.0));
  for (double g : {0.1, 1.0, 3.5}) {
    for (double nu : {0.7, 2.0, 19.0}) {
      const auto back = satterthwaite(g * nu, 2.0 * g * g * nu);
      CHECK(back.scale == doctest::Approx(g).epsilon(1e-13));
      CHECK(back.df == doctest::Approx(nu).epsilon(1e-13));
    }
  }
  CHECK(code_of([] { satterthwaite(0.0, 1.0); }) == ErrorCode::degenerate_distribution);
  CHECK(code_of([] { satterthwaite(1.0, -1.0); }) == ErrorCode::degenerate_distribution);
}

TEST_CASE("scaled chi-square tail") {
  CHECK(scaled_chisq_pvalue(0.0, 1.0, 3.0) == 1.0);
  CHECK(scaled_chisq_pvalue(2.0 * std::log(2.0), 1.0, 2.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(scaled_chisq_pvalue(4.0 * std::log(2.0), 2.0, 2.0) == doctest::Approx(0.5).epsilon(1e-14));
  double prev = 1.0;
  for (double s = 0.1; s < 40.0; s += 0.7) {
    const double p = scaled_chisq_pvalue(s, 1.3, 4.2);
    CHECK(p < prev);
    CHECK(p >= 0.0);
    prev = p;
  }
  CHECK(scaled_chisq_pvalue(1e6, 1.0, 1.0) == 1e-300);
  CHECK(scaled_chisq_pvalue(1e-30, 1.0, 2e4) == 1.0);
  CHECK(scaled_chisq_pvalue(1e8, 1.0, 1e8) == doctest::Approx(0.5).epsilon(1e-3));
  CHECK(code_of([] { scaled_chisq_pvalue(1.0, 0.0, 1.0); }) == ErrorCode::invalid_parameter);
  CHECK(code_of([] { scaled_chisq_pvalue(1.0, 1.0, -2.0); }) == ErrorCode::invalid_parameter);
}

TEST_CASE("Benjamini-Hochberg") {
  const std::vector<double> one{0.3};
  CHECK(bh_adjust(one) == one);
  const std::vector<double> p{0.01, 0.02, 0.03, 0.04};
  for (double v : bh_adjust(p)) CHECK(v == doctest::Approx(0.04));
  // Sorted: 0.001 0.008 0.039 0.041 0.042 0.06 0.074 0.205 0.212 0.216
  const std::vector<double> q{0.205, 0.001, 0.039, 0.074, 0.008, 0.041, 0.216, 0.042, 0.06, 0.212};
  const std::vector<double> expected{0.216, 0.01, 0.084, 0.074 * 10.0 / 7.0, 0.04, 0.084, 0.216, 0.084, 0.1, 0.216};
  const auto adj = bh_adjust(q);
  for (std::size_t i = 0; i < q.size(); ++i) {
    CHECK(adj[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    CHECK(adj[i] >= q[i]);
    CHECK(adj[i] <= 1.0);
  }
  std::vector<std::size_t> order(q.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return q[a] < q[b]; });
  for (std::size_t k = 1; k < order.size(); ++k) CHECK(adj[order[k]] >= adj[order[k - 1]]);
  const std::vector<double> bad{0.2, 1.2};
  CHECK(code_of([&] { bh_adjust(bad); }) == ErrorCode::invalid_parameter);
}

TEST_CASE("score tests: zero kernels, scale invariance and single-view collapse") {
  Instance in = gaussian_instance(40, 2, 1, 2);
  KernelFamily zero(40);
  zero.insert(EffectTerm{0}, MatrixXd::Zero(40, 40));
  const TestResult z = overall_test(in.y, in.x, zero, Family::gaussian());
  CHECK(z.statistic == 0.0);
  CHECK(z.p_value == 1.0);

  const TestResult a = overall_test(in.y, in.x, in.family, Family::gaussian());
  const TestResult b = overall_test(7.5 * in.y, in.x, in.family, Family::gaussian());
  CHECK(b.statistic == doctest::Approx(a.statistic).epsilon(1e-12));
  CHECK(b.p_value == doctest::Approx(a.p_value).epsilon(1e-12));

  KernelFamily single(40);
  single.insert(EffectTerm{0}, in.family.gram(EffectTerm{0}));
  const TestResult o = overall_test(in.y, in.x, single, Family::gaussian());
  const TestResult m = marginal_test(in.y, in.x, single, EffectTerm{0}, Family::gaussian());
  CHECK(o.statistic == m.statistic);
  CHECK(o.p_value == m.p_value);

  KernelFamily zi = in.family;
  zi.insert(EffectTerm{0, 1}, MatrixXd::Zero(40, 40));
  const TestResult zr = interaction_test(in.y, in.x, zi, EffectTerm{0, 1}, Family::gaussian());
  CHECK(zr.statistic == 0.0);
  CHECK(zr.p_value == 1.0);

  // The interaction statistic is the marginal skeleton with the product Gram substituted.
  KernelFamily swapped(40);
  swapped.insert(EffectTerm{0}, in.family.gram(EffectTerm{0, 1}));
  const TestResult ia = interaction_test(in.y, in.x, in.family, EffectTerm{0, 1}, Family::gaussian());
  const TestResult ma = marginal_test(in.y, in.x, swapped, EffectTerm{0}, Family::gaussian());
  CHECK(ia.statistic == doctest::Approx(ma.statistic).epsilon(1e-14));
  CHECK(ia.p_value == doctest::Approx(ma.p_value).epsilon(1e-14));

  CHECK(code_of([&] { marginal_test(in.y, in.x, in.family, EffectTerm{0, 1}, Family::gaussian()); }) ==
        ErrorCode::invalid_parameter);
  CHECK(code_of([&] { interaction_test(in.y, in.x, in.family, EffectTerm{0}, Family::gaussian()); }) ==
        ErrorCode::invalid_parameter);
}

TEST_CASE("overall test agrees with a residual permutation oracle") {
  // Intercept-only design: residual permutations are exact draws under the null.
  Instance in = gaussian_instance(40, 2, 2, 2);
  const MatrixXd ones = MatrixXd::Ones(40, 1);
  const TestResult r = overall_test(in.y, ones, in.family, Family::gaussian());
  const VectorXd res = in.y.array() - in.y.mean();
  const MatrixXd k = in.family.sum();
  const double s0 = res.dot(k * res);
  std::mt19937_64 rng(3);
  std::vector<int> idx(40);
  std::iota(idx.begin(), idx.end(), 0);
  int exceed = 0;
  const int perms = 2000;
  VectorXd permuted(40);
  for (int b = 0; b < perms; ++b) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < 40; ++i) permuted[i] = res[idx[i]];
    exceed += permuted.dot(k * permuted) >= s0 ? 1 : 0;
  }
  const double p_perm = (1.0 + exceed) / (1.0 + perms);
  CHECK(std::abs(r.p_value - p_perm) <= 0.05);
}

TEST_CASE("marginal test power and calibration on simulated data") {
  int strong = 0, null_rejections = 0;
  const int reps = 100;
  for (int rep = 0; rep < reps; ++rep) {
    std::mt19937_64 rng(1000 + rep);
    const Eigen::Index n = 200;
    MatrixXd x = random_matrix(n, 2, rng);
    x.col(0).setOnes();
    ViewMatrix v{random_matrix(n, 4, rng), ViewKind::numeric, 0};
    KernelFamily fam(n);
    fam.insert(EffectTerm{0}, gaussian_gram(v, median_bandwidth(v)));
    const VectorXd noise = random_matrix(n, 1, rng);
    VectorXd signal = v.data.array().cos().rowwise().sum().matrix();
    signal = signal.array() - signal.mean();
    const VectorXd y_alt = signal + noise;
    strong += marginal_test(y_alt, x, fam, EffectTerm{0}, Family::gaussian()).p_value < 0.01 ? 1 : 0;
    null_rejections += marginal_test(noise, x, fam, EffectTerm{0}, Family::gaussian()).p_value <= 0.05 ? 1 : 0;
  }
  CHECK(strong >= 90);
  CHECK(null_rejections <= 12);
}

TEST_CASE("interaction test detects a planted pairwise effect") {
  std::vector<double> p;
  for (int rep = 0; rep < 100; ++rep) {
    std::mt19937_64 rng(5000 + rep);
    const Eigen::Index n = 150;
    MatrixXd x = MatrixXd::Ones(n, 1);
    std::vector<ViewMatrix> views{{random_matrix(n, 2, rng), ViewKind::numeric, 0},
                                  {random_matrix(n, 2, rng), ViewKind::numeric, 1}};
    const KernelFamily fam = build_family(views, std::vector<KernelSpec>(2, KernelSpec::gaussian()), 2);
    const VectorXd y = (views[0].data.col(0).array() * views[1].data.col(0).array()).matrix() +
                       random_matrix(n, 1, rng);
    p.push_back(interaction_test(y, x, fam, EffectTerm{0, 1}, Family::gaussian()).p_value);
  }
  std::nth_element(p.begin(), p.begin() + 50, p.end());
  CHECK(p[50] < 0.05);
}

TEST_CASE("composite test basics") {
  Instance in = gaussian_instance(50, 3, 4, 3);
  KernelFamily fam = in.family;
  fam.insert(EffectTerm{0, 1, 2}, MatrixXd::Zero(50, 50));
  for (auto v : {CompositeVariance::plain, CompositeVariance::efficient_variance, CompositeVariance::orthogonal_score}) {
    const TestResult z = composite_test(in.y, in.x, fam, EffectTerm{0, 1, 2}, Family::gaussian(), std::nullopt, {}, v);
    CHECK(z.statistic == 0.0);
    CHECK(z.p_value == 1.0);
  }
  const TestResult r = composite_test(in.y, in.x, in.family, EffectTerm{0, 1, 2}, Family::gaussian());
  CHECK(r.statistic >= 0.0);
  CHECK(r.p_value >= 0.0);
  CHECK(r.p_value <= 1.0);
  REQUIRE(r.null_theta.has_value());
  CHECK(r.null_theta->terms.size() == 6);
  CHECK(code_of([&] {
          composite_test(in.y, in.x, in.family, EffectTerm{0, 1}, Family::gaussian(),
                         std::vector<EffectTerm>{EffectTerm{0, 1}});
        }) == ErrorCode::invalid_parameter);
}

TEST_CASE("composite test without null terms reduces to the interaction test") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    Instance in = gaussian_instance(60, 2, seed, 2);
    const TestResult c = composite_test(in.y, in.x, in.family, EffectTerm{0, 1}, Family::gaussian(),
                                        std::vector<EffectTerm>{});
    const TestResult i = interaction_test(in.y, in.x, in.family, EffectTerm{0, 1}, Family::gaussian());
    CHECK(c.p_value == doctest::Approx(i.p_value).epsilon(1e-10));
    CHECK(c.df == doctest::Approx(i.df).epsilon(1e-10));
    CHECK(c.statistic / c.scale == doctest::Approx(i.statistic / i.scale).epsilon(1e-10));

    // All components zero at the MLE dispersion.
    const NullModelFit glm = fit_null_glm(in.y, in.x, Family::gaussian());
    const VarianceComponents zero{glm.dispersion, {EffectTerm{0}, EffectTerm{1}}, {0.0, 0.0}};
    const TestResult at = composite_test_at(in.y, in.x, in.family, EffectTerm{0, 1}, zero, VectorXd::Ones(60),
                                            CompositeVariance::plain);
    CHECK(std::abs(at.p_value - i.p_value) <= 1e-8);
    CHECK(at.df == doctest::Approx(i.df).epsilon(1e-10));
    CHECK(at.statistic / at.scale == doctest::Approx(i.statistic / i.scale).epsilon(1e-10));
  }
}

TEST_CASE("orthogonalised composite statistic leaves interior estimates untouched") {
  std::mt19937_64 rng(20);
  const Eigen::Index n = 150;
  MatrixXd x = MatrixXd::Ones(n, 1);
  std::vector<ViewMatrix> views{{random_matrix(n, 3, rng), ViewKind::numeric, 0},
                                {random_matrix(n, 3, rng), ViewKind::numeric, 1}};
  const KernelFamily fam = build_family(views, std::vector<KernelSpec>(2, KernelSpec::gaussian()), 2);
  const MatrixXd sigma = MatrixXd::Identity(n, n) + 2.0 * fam.gram(EffectTerm{0}) + 2.0 * fam.gram(EffectTerm{1});
  const VectorXd y = simulate_gaussian_response(x, VectorXd::Zero(1), sigma, 21);
  const RemlFit fit = reml_fit(y, x, fam, {EffectTerm{0}, EffectTerm{1}});
  REQUIRE(fit.converged);
  REQUIRE(fit.theta.taus[0] > 0.0);
  REQUIRE(fit.theta.taus[1] > 0.0);
  auto at = [&](CompositeVariance v) {
    return composite_test_at(fit.working_response, x, fam, EffectTerm{0, 1}, fit.theta, fit.base_variance, v,
                             Sigma2Role::stationary);
  };
  const TestResult plain = at(CompositeVariance::plain);
  const TestResult orth = at(CompositeVariance::orthogonal_score);
  const TestResult eff = at(CompositeVariance::efficient_variance);
  CHECK(orth.statistic == doctest::Approx(plain.statistic).epsilon(1e-12));
  CHECK(orth.null_moments.mean == doctest::Approx(plain.null_moments.mean).epsilon(1e-12));
  CHECK(orth.null_moments.variance < plain.null_moments.variance);
  CHECK(eff.null_moments.variance == doctest::Approx(orth.null_moments.variance).epsilon(1e-10));
}

TEST_CASE("binary composite test runs on simulated data") {
  SimConfig cfg;
  cfg.n = 150;
  cfg.m = 3;
  cfg.alphas = {0.1, 0.0, 0.0};
  cfg.seed = 77;
  const MultiViewDataset d = generate_synthetic(cfg);
  const KernelFamily fam = build_family(d.views, default_kernels(d.views), 3);
  const TestResult r = composite_test(d.y, d.covariates, fam, EffectTerm{0, 1, 2}, Family::binomial());
  CHECK(r.p_value >= 0.0);
  CHECK(r.p_value <= 1.0);
  CHECK(r.null_theta->sigma2 == 1.0);
}
