#pragma once

// Gram matrices for single views and Hadamard-product interaction terms.

#include "mvkm/error.hpp"

#include <Eigen/Dense>

#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mvkm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class ViewKind { numeric, genotype };

/// One data view: n subjects by p features, rows aligned across views.
struct ViewMatrix {
  MatrixXd data;
  ViewKind kind = ViewKind::numeric;
  int view_id = 0;  // zero-based position among the views

  Eigen::Index subjects() const { return data.rows(); }
  Eigen::Index features() const { return data.cols(); }
};

/// Throws invalid-genotype / insufficient-data when the view breaks its invariants.
void validate_view(const ViewMatrix& view);

enum class KernelKind { linear, polynomial, gaussian, ibs };

struct KernelSpec {
  KernelKind kind = KernelKind::gaussian;
  double poly_offset = 0.0;
  int poly_degree = 2;
  // Empty means: resolve with median_bandwidth at build time.
  std::optional<double> bandwidth;
  // Centre each feature and scale it to unit sample variance before the kernel is applied.
  bool standardize = false;

  static KernelSpec linear(bool standardize = false) {
    return {KernelKind::linear, 0.0, 1, std::nullopt, standardize};
  }
  static KernelSpec polynomial(double c, int d) { return {KernelKind::polynomial, c, d, std::nullopt}; }
  static KernelSpec gaussian(std::optional<double> bw = std::nullopt) {
    return {KernelKind::gaussian, 0.0, 1, bw};
  }
  static KernelSpec ibs() { return {KernelKind::ibs, 0.0, 1, std::nullopt}; }

  /// IBS for genotype views, median-bandwidth Gaussian otherwise.
  static KernelSpec default_for(ViewKind kind) {
    return kind == ViewKind::genotype ? ibs() : gaussian();
  }
};

/// A nonempty set of zero-based view indices. Ordered by size, then lexicographically.
class EffectTerm {
 public:
  EffectTerm() = default;
  explicit EffectTerm(std::vector<int> views);
  EffectTerm(std::initializer_list<int> views) : EffectTerm(std::vector<int>(views)) {}

  const std::vector<int>& views() const { return views_; }
  std::size_t order() const { return views_.size(); }
  bool contains(int view) const;

  /// "1x2x3" with one-based view numbers.
  std::string label() const;

  std::strong_ordering operator<=>(const EffectTerm& other) const;
  bool operator==(const EffectTerm& other) const = default;

 private:
  std::vector<int> views_;
};

/// Every term over `m` views with order at most `max_order`, in canonical order.
std::vector<EffectTerm> all_terms(int m, int max_order);

/// Gram matrices keyed by effect term, stored in canonical term order.
class KernelFamily {
 public:
  KernelFamily() = default;
  explicit KernelFamily(Eigen::Index n) : n_(n) {}

  Eigen::Index subjects() const { return n_; }
  std::size_t size() const { return grams_.size(); }
  bool contains(const EffectTerm& term) const;

  /// Throws missing-kernel when absent.
  const MatrixXd& gram(const EffectTerm& term) const;

  /// Inserts or replaces, keeping canonical order.
  void insert(EffectTerm term, MatrixXd gram);

  std::vector<EffectTerm> terms() const;
  const std::vector<std::pair<EffectTerm, MatrixXd>>& entries() const { return grams_; }

  /// Sum of every Gram in the family.
  MatrixXd sum() const;

 private:
  Eigen::Index n_ = 0;
  std::vector<std::pair<EffectTerm, MatrixXd>> grams_;
};

MatrixXd linear_gram(const ViewMatrix& view);
MatrixXd polynomial_gram(const ViewMatrix& view, double offset, int degree);
MatrixXd gaussian_gram(const ViewMatrix& view, double bandwidth);
MatrixXd ibs_gram(const ViewMatrix& view);

/// Lower median of pairwise Euclidean distances; 1.0 if that median is zero.
double median_bandwidth(const ViewMatrix& view);

/// Columns centred to mean 0 and scaled to unit sample variance; constant columns become 0.
MatrixXd standardize_columns(const MatrixXd& data);

/// Gram for one view under `spec`, resolving an automatic bandwidth.
MatrixXd view_gram(const ViewMatrix& view, const KernelSpec& spec);

/// Elementwise product of the marginal Grams of every view in `term`.
MatrixXd interaction_gram(const KernelFamily& family, const EffectTerm& term);

/// Marginal Grams for each view, then Hadamard products for every term up to `max_order`.
KernelFamily build_family(std::span<const ViewMatrix> views, std::span<const KernelSpec> specs,
                          int max_order);

/// Symmetry, PSD tolerance, and (optionally) unit diagonal with entries in [0, 1].
struct GramCheck {
  double asymmetry = 0.0;
  double min_eigenvalue = 0.0;
  double psd_floor = 0.0;  // -1e-8 * n * max(diag)
  bool symmetric = false;
  bool psd = false;
  bool unit_diagonal = false;
  bool unit_range = false;

  bool ok(bool require_unit = false) const {
    return symmetric && psd && (!require_unit || (unit_diagonal && unit_range));
  }
};

GramCheck check_gram(const MatrixXd& gram);

}  // namespace mvkm
