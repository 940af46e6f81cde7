#include "mvkm/kernels.hpp"

#include "mvkm/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mvkm {

void validate_view(const ViewMatrix& view) {
  if (view.subjects() < 2 || view.features() < 1) {
    throw Error(ErrorCode::insufficient_data,
                "view " + std::to_string(view.view_id + 1) + " needs n >= 2 and p >= 1");
  }
  if (!view.data.allFinite()) {
    throw Error(ErrorCode::data_error,
                "view " + std::to_string(view.view_id + 1) + " has missing or non-finite entries");
  }
  if (view.kind == ViewKind::genotype) {
    for (Eigen::Index j = 0; j < view.data.cols(); ++j) {
      for (Eigen::Index i = 0; i < view.data.rows(); ++i) {
        const double g = view.data(i, j);
        if (g != 0.0 && g != 1.0 && g != 2.0) {
          std::ostringstream msg;
          msg << "view " << view.view_id + 1 << " entry (" << i << ", " << j << ") = " << g
              << " is not in {0, 1, 2}";
          throw Error(ErrorCode::invalid_genotype, msg.str());
        }
      }
    }
  }
}

EffectTerm::EffectTerm(std::vector<int> views) : views_(std::move(views)) {
  if (views_.empty()) throw Error(ErrorCode::invalid_parameter, "effect term needs at least one view");
  std::sort(views_.begin(), views_.end());
  if (std::adjacent_find(views_.begin(), views_.end()) != views_.end()) {
    throw Error(ErrorCode::invalid_parameter, "effect term lists a view twice");
  }
  if (views_.front() < 0) throw Error(ErrorCode::invalid_parameter, "negative view index");
}

bool EffectTerm::contains(int view) const {
  return std::binary_search(views_.begin(), views_.end(), view);
}

std::string EffectTerm::label() const {
  std::string out;
  for (std::size_t i = 0; i < views_.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(views_[i] + 1);
  }
  return out;
}

std::strong_ordering EffectTerm::operator<=>(const EffectTerm& other) const {
  if (auto c = views_.size() <=> other.views_.size(); c != 0) return c;
  return views_ <=> other.views_;
}

std::vector<EffectTerm> all_terms(int m, int max_order) {
  if (m < 1 || max_order < 1 || max_order > m) {
    throw Error(ErrorCode::invalid_parameter, "need 1 <= max_order <= m");
  }
  std::vector<EffectTerm> terms;
  for (unsigned mask = 1; mask < (1u << m); ++mask) {
    std::vector<int> views;
    for (int v = 0; v < m; ++v) {
      if (mask & (1u << v)) views.push_back(v);
    }
    if (static_cast<int>(views.size()) <= max_order) terms.emplace_back(std::move(views));
  }
  std::sort(terms.begin(), terms.end());
  return terms;
}

bool KernelFamily::contains(const EffectTerm& term) const {
  return std::any_of(grams_.begin(), grams_.end(), [&](const auto& e) { return e.first == term; });
}

const MatrixXd& KernelFamily::gram(const EffectTerm& term) const {
  for (const auto& [t, g] : grams_) {
    if (t == term) return g;
  }
  throw Error(ErrorCode::missing_kernel, "no Gram for term " + term.label());
}

void KernelFamily::insert(EffectTerm term, MatrixXd gram) {
  if (gram.rows() != gram.cols()) throw Error(ErrorCode::dimension_mismatch, "Gram must be square");
  if (n_ == 0) n_ = gram.rows();
  if (gram.rows() != n_) {
    throw Error(ErrorCode::dimension_mismatch, "Gram for " + term.label() + " has wrong size");
  }
  auto it = std::lower_bound(grams_.begin(), grams_.end(), term,
                             [](const auto& e, const EffectTerm& t) { return e.first < t; });
  if (it != grams_.end() && it->first == term) {
    it->second = std::move(gram);
  } else {
    grams_.emplace(it, std::move(term), std::move(gram));
  }
}

std::vector<EffectTerm> KernelFamily::terms() const {
  std::vector<EffectTerm> out;
  out.reserve(grams_.size());
  for (const auto& e : grams_) out.push_back(e.first);
  return out;
}

MatrixXd KernelFamily::sum() const {
  MatrixXd total = MatrixXd::Zero(n_, n_);
  for (const auto& e : grams_) total += e.second;
  return total;
}

namespace {

void require_numeric(const ViewMatrix& view, const char* kernel) {
  if (view.kind != ViewKind::numeric) {
    throw Error(ErrorCode::kernel_view_mismatch,
                std::string(kernel) + " kernel needs a numeric view, got genotype view " +
                    std::to_string(view.view_id + 1));
  }
}

MatrixXd symmetrized(MatrixXd g) {
  // Products computed as X X^T can differ in the last ulp across the diagonal.
  g.triangularView<Eigen::StrictlyLower>() = g.transpose().triangularView<Eigen::StrictlyLower>();
  return g;
}

MatrixXd squared_distances(const MatrixXd& x) {
  const Eigen::Index n = x.rows();
  MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d2(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (x.row(i) - x.row(j)).squaredNorm();
      d2(i, j) = v;
      d2(j, i) = v;
    }
  }
  return d2;
}

}  // namespace

MatrixXd linear_gram(const ViewMatrix& view) {
  require_numeric(view, "linear");
  MatrixXd g(view.subjects(), view.subjects());
  g.setZero();
  g.selfadjointView<Eigen::Lower>().rankUpdate(view.data);
  return symmetrized(g.selfadjointView<Eigen::Lower>());
}

MatrixXd polynomial_gram(const ViewMatrix& view, double offset, int degree) {
  if (!(offset >= 0.0) || degree < 1) {
    throw Error(ErrorCode::invalid_parameter, "polynomial kernel needs c >= 0 and d >= 1");
  }
  require_numeric(view, "polynomial");
  MatrixXd g = linear_gram(view);
  g = (g.array() + offset).pow(static_cast<double>(degree)).matrix();
  return g;
}

MatrixXd gaussian_gram(const ViewMatrix& view, double bandwidth) {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw Error(ErrorCode::invalid_parameter, "Gaussian bandwidth must be positive");
  }
  require_numeric(view, "Gaussian");
  const MatrixXd d2 = squared_distances(view.data);
  return (-d2.array() / (2.0 * bandwidth * bandwidth)).exp().matrix();
}

double median_bandwidth(const ViewMatrix& view) {
  const Eigen::Index n = view.subjects();
  if (n < 2) throw Error(ErrorCode::insufficient_data, "median bandwidth needs at least two subjects");
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      dist.push_back((view.data.row(i) - view.data.row(j)).norm());
    }
  }
  const std::size_t k = (dist.size() - 1) / 2;  // lower median
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
  const double med = dist[k];
  return med > 0.0 ? med : 1.0;
}

MatrixXd ibs_gram(const ViewMatrix& view) {
  ViewMatrix checked = view;
  checked.kind = ViewKind::genotype;
  validate_view(checked);
  const Eigen::Index n = view.subjects();
  const double s = static_cast<double>(view.features());
  MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    g(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double mismatch = (view.data.row(i) - view.data.row(j)).cwiseAbs().sum();
      const double v = 1.0 - mismatch / (2.0 * s);
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

MatrixXd standardize_columns(const MatrixXd& data) {
  MatrixXd out = data.rowwise() - data.colwise().mean();
  const double denom = std::max<double>(static_cast<double>(data.rows()) - 1.0, 1.0);
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    const double sd = std::sqrt(out.col(j).squaredNorm() / denom);
    if (sd > 1e-12) out.col(j) /= sd;
    else out.col(j).setZero();
  }
  return out;
}

MatrixXd view_gram(const ViewMatrix& view, const KernelSpec& spec) {
  if (spec.standardize) {
    if (spec.kind == KernelKind::ibs) {
      throw Error(ErrorCode::invalid_parameter, "the IBS kernel needs raw allele counts");
    }
    validate_view(view);
    KernelSpec raw = spec;
    raw.standardize = false;
    return view_gram(ViewMatrix{standardize_columns(view.data), ViewKind::numeric, view.view_id}, raw);
  }
  switch (spec.kind) {
    case KernelKind::linear: return linear_gram(view);
    case KernelKind::polynomial: return polynomial_gram(view, spec.poly_offset, spec.poly_degree);
    case KernelKind::gaussian:
      return gaussian_gram(view, spec.bandwidth ? *spec.bandwidth : median_bandwidth(view));
    case KernelKind::ibs: return ibs_gram(view);
  }
  throw Error(ErrorCode::invalid_parameter, "unknown kernel kind");
}

MatrixXd interaction_gram(const KernelFamily& family, const EffectTerm& term) {
  const auto& views = term.views();
  MatrixXd product = family.gram(EffectTerm{views.front()});
  for (std::size_t i = 1; i < views.size(); ++i) {
    product.array() *= family.gram(EffectTerm{views[i]}).array();
  }
  return product;
}

KernelFamily build_family(std::span<const ViewMatrix> views, std::span<const KernelSpec> specs,
                          int max_order) {
  const int m = static_cast<int>(views.size());
  if (m == 0 || specs.size() != views.size()) {
    throw Error(ErrorCode::invalid_parameter, "need one kernel spec per view");
  }
  const Eigen::Index n = views.front().subjects();
  KernelFamily family(n);
  for (int v = 0; v < m; ++v) {
    if (views[v].subjects() != n) {
      throw Error(ErrorCode::dimension_mismatch,
                  "view " + std::to_string(v + 1) + " has a different subject count");
    }
    try {
      validate_view(views[v]);
      family.insert(EffectTerm{v}, view_gram(views[v], specs[v]));
    } catch (const Error& e) {
      throw Error(e.code(), "view " + std::to_string(v + 1) + ": " + e.detail());
    }
  }
  for (const auto& term : all_terms(m, max_order)) {
    if (term.order() > 1) family.insert(term, interaction_gram(family, term));
  }
  return family;
}

GramCheck check_gram(const MatrixXd& gram) {
  GramCheck out;
  const Eigen::Index n = gram.rows();
  out.asymmetry = (gram - gram.transpose()).cwiseAbs().maxCoeff();
  out.symmetric = gram.rows() == gram.cols() && out.asymmetry <= 1e-10;
  const double max_diag = gram.diagonal().maxCoeff();
  out.psd_floor = -1e-8 * static_cast<double>(n) * std::max(max_diag, 0.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  out.min_eigenvalue = eig.eigenvalues().minCoeff();
  out.psd = out.min_eigenvalue >= out.psd_floor;
  out.unit_diagonal = (gram.diagonal().array() - 1.0).abs().maxCoeff() <= 1e-12;
  out.unit_range = gram.minCoeff() >= 0.0 && gram.maxCoeff() <= 1.0 + 1e-12;
  return out;
}

}  // namespace mvkm
