#include "mvkm/inference.hpp"
#include "mvkm/screen.hpp"
#include "mvkm/simulation.hpp"
#include "mvkm/study.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace mvkm;

namespace {

std::vector<ViewMatrix> make_views(const std::vector<MatrixXd>& data, const std::vector<int>& genotype) {
  std::vector<ViewMatrix> views;
  for (std::size_t v = 0; v < data.size(); ++v) {
    ViewMatrix view{data[v], ViewKind::numeric, static_cast<int>(v)};
    for (int g : genotype) {
      if (g == static_cast<int>(v)) view.kind = ViewKind::genotype;
    }
    validate_view(view);
    views.push_back(std::move(view));
  }
  return views;
}

py::dict result_dict(const TestResult& r) {
  py::dict d;
  d["kind"] = std::string(to_string(r.kind));
  d["term"] = r.term.views().empty() ? std::string() : r.term.label();
  d["statistic"] = r.statistic;
  d["scale"] = r.scale;
  d["df"] = r.df;
  d["p_value"] = r.p_value;
  d["null_mean"] = r.null_moments.mean;
  d["null_variance"] = r.null_moments.variance;
  if (r.null_theta) {
    py::dict taus;
    for (std::size_t t = 0; t < r.null_theta->terms.size(); ++t) taus[py::str(r.null_theta->terms[t].label())] = r.null_theta->taus[t];
    d["sigma2"] = r.null_theta->sigma2;
    d["taus"] = taus;
  }
  return d;
}

EffectTerm to_term(std::vector<int> views) { return EffectTerm(std::move(views)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-view kernel machine score tests";

  static py::exception<Error> error(m, "MvkmError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = static_cast<py::object&>(error)(e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(error.ptr(), exc.ptr());
    }
  });

  m.def("linear_gram", [](const MatrixXd& x) { return linear_gram({x}); }, py::arg("x"));
  m.def("gaussian_gram", [](const MatrixXd& x, std::optional<double> bandwidth) {
    const ViewMatrix v{x};
    return gaussian_gram(v, bandwidth.value_or(median_bandwidth(v)));
  }, py::arg("x"), py::arg("bandwidth") = py::none());
  m.def("polynomial_gram", [](const MatrixXd& x, double offset, int degree) { return polynomial_gram({x}, offset, degree); },
        py::arg("x"), py::arg("offset"), py::arg("degree"));
  m.def("ibs_gram", [](const MatrixXd& g) {
    const ViewMatrix v{g, ViewKind::genotype};
    validate_view(v);
    return ibs_gram(v);
  }, py::arg("genotypes"));

  m.def("kernel_family", [](const std::vector<MatrixXd>& views, int max_order, const std::vector<int>& genotype_views) {
    const auto vs = make_views(views, genotype_views);
    const KernelFamily fam = build_family(vs, default_kernels(vs), max_order);
    py::dict out;
    for (const auto& [term, gram] : fam.entries()) out[py::str(term.label())] = gram;
    return out;
  }, py::arg("views"), py::arg("max_order") = 2, py::arg("genotype_views") = std::vector<int>{});

  m.def("score_tests", [](const VectorXd& y, const MatrixXd& x, const std::vector<MatrixXd>& views,
                          const std::string& family, const std::vector<int>& genotype_views, int max_order) {
    const auto vs = make_views(views, genotype_views);
    const KernelFamily fam = build_family(vs, default_kernels(vs), max_order);
    const Family f = parse_family(family);
    py::list out;
    out.append(result_dict(overall_test(y, x, fam, f)));
    for (const EffectTerm& t : fam.terms()) {
      if (t.order() == 1) {
        out.append(result_dict(marginal_test(y, x, fam, t, f)));
      } else {
        out.append(result_dict(interaction_test(y, x, fam, t, f)));
        out.append(result_dict(composite_test(y, x, fam, t, f)));
      }
    }
    return out;
  }, py::arg("y"), py::arg("x"), py::arg("views"), py::arg("family") = "gaussian",
     py::arg("genotype_views") = std::vector<int>{}, py::arg("max_order") = 2);

  m.def("composite_test", [](const VectorXd& y, const MatrixXd& x, const std::vector<MatrixXd>& views,
                             std::vector<int> target, const std::string& family, const std::string& variance,
                             const std::vector<int>& genotype_views) {
    const auto vs = make_views(views, genotype_views);
    const KernelFamily fam = build_family(vs, default_kernels(vs), static_cast<int>(target.size()));
    return result_dict(composite_test(y, x, fam, to_term(std::move(target)), parse_family(family), std::nullopt, {},
                                      parse_composite_variance(variance)));
  }, py::arg("y"), py::arg("x"), py::arg("views"), py::arg("target"), py::arg("family") = "gaussian",
     py::arg("variance") = "orthogonal_score", py::arg("genotype_views") = std::vector<int>{});

  m.def("reml_fit", [](const VectorXd& y, const MatrixXd& x, const std::vector<MatrixXd>& grams, const std::string& family) {
    KernelFamily fam(y.size());
    for (std::size_t k = 0; k < grams.size(); ++k) fam.insert(EffectTerm{static_cast<int>(k)}, grams[k]);
    const RemlFit fit = reml_fit(y, x, fam, fam.terms(), parse_family(family));
    py::dict d;
    d["sigma2"] = fit.theta.sigma2;
    d["taus"] = fit.theta.taus;
    d["restricted_loglik"] = fit.restricted_loglik;
    d["converged"] = fit.converged;
    d["iterations"] = fit.iterations;
    return d;
  }, py::arg("y"), py::arg("x"), py::arg("grams"), py::arg("family") = "gaussian");

  m.def("satterthwaite_pvalue", &scaled_chisq_pvalue, py::arg("statistic"), py::arg("scale"), py::arg("df"));
  m.def("bh_adjust", [](const std::vector<double>& p) { return bh_adjust(p); }, py::arg("p_values"));

  m.def("simulate", [](int n, int m_views, std::vector<double> alphas, std::uint64_t seed) {
    SimConfig cfg;
    cfg.n = n;
    cfg.m = m_views;
    cfg.alphas = std::move(alphas);
    cfg.seed = seed;
    const MultiViewDataset d = generate_synthetic(cfg);
    std::vector<MatrixXd> views;
    for (const auto& v : d.views) views.push_back(v.data);
    return py::make_tuple(d.y, d.covariates, views);
  }, py::arg("n"), py::arg("m"), py::arg("alphas"), py::arg("seed") = 1);

  m.def("power_study", [](const std::string& config_json, int workers) {
    const PowerStudyConfig cfg = parse_power_study(nlohmann::json::parse(config_json));
    py::gil_scoped_release release;
    return power_table_tsv(power_study(cfg.grid, cfg.methods, cfg.alpha, workers, cfg.options));
  }, py::arg("config_json"), py::arg("workers") = 1);

  m.def("run_screen", [](const std::string& config_path) {
    const RunConfig cfg = load_run_config(config_path);
    ScreenReport report;
    {
      py::gil_scoped_release release;
      report = run_screen(cfg);
    }
    py::dict d;
    d["results"] = results_tsv(report);
    d["plotdata"] = plotdata_tsv(report);
    d["manifest"] = manifest_json(cfg, report).dump();
    d["failed_tuples"] = report.failed_tuples;
    return d;
  }, py::arg("config_path"));
}
