#pragma once

// B-spline design blocks, difference penalties and ANOVA-constrained tensor
// product interaction bases for the smooth terms of the perception model.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "salperc/diagnostics.hpp"

namespace salperc {

struct Interval {
  double lower = 0.0;
  double upper = 1.0;

  [[nodiscard]] double clamp(double x) const { return std::clamp(x, lower, upper); }
  [[nodiscard]] bool contains(double x) const { return x >= lower && x <= upper; }
  [[nodiscard]] double width() const { return upper - lower; }
};

enum class KnotPlacement { uniform, quantile };

struct BasisSpec {
  std::string covariate;
  int degree = 3;
  int num_basis = 10;
  KnotPlacement knots = KnotPlacement::uniform;
  Interval range{0.0, 1.0};
};

inline void validate(const BasisSpec& spec) {
  if (spec.degree < 1) {
    throw Error(ErrorCode::config, "basis '" + spec.covariate + "': degree must be >= 1");
  }
  if (spec.num_basis < spec.degree + 2) {
    throw Error(ErrorCode::config, "basis '" + spec.covariate + "': num_basis " +
                                       std::to_string(spec.num_basis) + " < degree + 2 = " +
                                       std::to_string(spec.degree + 2));
  }
  if (!(spec.range.lower < spec.range.upper)) {
    throw Error(ErrorCode::config, "basis '" + spec.covariate + "': range lower must be < upper");
  }
}

/// Clamped (open) B-spline basis on spec.range. Evaluation outside the range
/// clamps to the nearest endpoint.
class BSplineBasis {
 public:
  BSplineBasis() = default;

  BSplineBasis(BasisSpec spec, std::vector<double> knots)
      : spec_(std::move(spec)), knots_(std::move(knots)) {
    validate(spec_);
    const auto expected = static_cast<std::size_t>(spec_.num_basis + spec_.degree + 1);
    if (knots_.size() != expected) {
      throw Error(ErrorCode::config, "basis '" + spec_.covariate + "': expected " +
                                         std::to_string(expected) + " knots, got " +
                                         std::to_string(knots_.size()));
    }
    if (!std::is_sorted(knots_.begin(), knots_.end())) {
      throw Error(ErrorCode::config, "basis '" + spec_.covariate + "': knot vector must be non-decreasing");
    }
  }

  /// Builds the knot vector for `spec`; quantile placement uses `samples`.
  static BSplineBasis make(const BasisSpec& spec, std::span<const double> samples = {}) {
    validate(spec);
    const int p = spec.degree;
    const int interior = spec.num_basis - p - 1;
    std::vector<double> interior_knots(static_cast<std::size_t>(interior));
    const double lo = spec.range.lower;
    const double hi = spec.range.upper;
    for (int j = 0; j < interior; ++j) {
      interior_knots[j] = lo + (hi - lo) * (j + 1) / (interior + 1);
    }
    if (spec.knots == KnotPlacement::quantile && interior > 0) {
      std::vector<double> sorted;
      sorted.reserve(samples.size());
      for (double x : samples) {
        if (std::isfinite(x)) sorted.push_back(spec.range.clamp(x));
      }
      std::sort(sorted.begin(), sorted.end());
      if (sorted.size() >= 2) {
        std::vector<double> q(static_cast<std::size_t>(interior));
        for (int j = 0; j < interior; ++j) {
          const double pos = static_cast<double>(j + 1) / (interior + 1) * (sorted.size() - 1);
          const auto i0 = static_cast<std::size_t>(std::floor(pos));
          const auto i1 = std::min(i0 + 1, sorted.size() - 1);
          q[j] = sorted[i0] + (pos - i0) * (sorted[i1] - sorted[i0]);
        }
        bool strict = q.front() > lo && q.back() < hi;
        for (std::size_t j = 1; j < q.size(); ++j) strict = strict && q[j] > q[j - 1];
        if (strict) {
          interior_knots = std::move(q);
        } else {
          warn("basis '" + spec.covariate + "': quantile knots collide, falling back to uniform knots");
        }
      }
    }
    std::vector<double> knots;
    knots.reserve(static_cast<std::size_t>(spec.num_basis + p + 1));
    knots.insert(knots.end(), static_cast<std::size_t>(p + 1), lo);
    knots.insert(knots.end(), interior_knots.begin(), interior_knots.end());
    knots.insert(knots.end(), static_cast<std::size_t>(p + 1), hi);
    return BSplineBasis(spec, std::move(knots));
  }

  [[nodiscard]] const BasisSpec& spec() const { return spec_; }
  [[nodiscard]] const std::vector<double>& knots() const { return knots_; }
  [[nodiscard]] int size() const { return spec_.num_basis; }

  /// Writes all basis values at x into out (size k). With `left_limit` the
  /// half-open knot spans are taken as (t_j, t_j+1] instead of [t_j, t_j+1).
  void evaluate(double x, std::span<double> out, bool left_limit = false) const {
    const int p = spec_.degree;
    const int k = spec_.num_basis;
    std::fill(out.begin(), out.end(), 0.0);
    x = spec_.range.clamp(x);
    const int span = find_span(x, left_limit);
    // Cox-de Boor triangle for the p+1 functions supported on the span.
    double local[32];
    double left[32];
    double right[32];
    local[0] = 1.0;
    for (int r = 1; r <= p; ++r) {
      left[r] = x - knots_[span + 1 - r];
      right[r] = knots_[span + r] - x;
      double saved = 0.0;
      for (int q = 0; q < r; ++q) {
        const double tmp = local[q] / (right[q + 1] + left[r - q]);
        local[q] = saved + right[q + 1] * tmp;
        saved = left[r - q] * tmp;
      }
      local[r] = saved;
    }
    for (int q = 0; q <= p; ++q) {
      const int j = span - p + q;
      if (j >= 0 && j < k) out[j] = local[q];
    }
  }

  [[nodiscard]] Eigen::RowVectorXd row(double x) const {
    Eigen::RowVectorXd r(spec_.num_basis);
    evaluate(x, std::span<double>(r.data(), static_cast<std::size_t>(r.size())));
    return r;
  }

  /// n x k design block. Non-finite samples are rejected with their index.
  [[nodiscard]] Eigen::MatrixXd design(std::span<const double> x) const {
    Eigen::MatrixXd block(static_cast<Eigen::Index>(x.size()), spec_.num_basis);
    std::vector<double> buf(static_cast<std::size_t>(spec_.num_basis));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!std::isfinite(x[i])) {
        throw Error(ErrorCode::input, "basis '" + spec_.covariate + "': non-finite sample at index " +
                                          std::to_string(i));
      }
      evaluate(x[i], buf);
      for (int j = 0; j < spec_.num_basis; ++j) block(static_cast<Eigen::Index>(i), j) = buf[j];
    }
    return block;
  }

 private:
  [[nodiscard]] int find_span(double x, bool left_limit) const {
    const int p = spec_.degree;
    const int k = spec_.num_basis;
    if (!left_limit) {
      if (x >= knots_[k]) return k - 1;
      // largest j in [p, k-1] with t_j <= x
      int j = static_cast<int>(std::upper_bound(knots_.begin() + p, knots_.begin() + k + 1, x) -
                               knots_.begin()) - 1;
      return std::clamp(j, p, k - 1);
    }
    if (x <= knots_[p]) return p;
    // smallest j in [p, k-1] with x <= t_{j+1}
    int j = static_cast<int>(std::lower_bound(knots_.begin() + p + 1, knots_.begin() + k + 1, x) -
                             knots_.begin()) - 1;
    return std::clamp(j, p, k - 1);
  }

  BasisSpec spec_;
  std::vector<double> knots_;
};

/// Builds the basis (knots from the samples when quantile placement is asked
/// for) and returns the n x k design block.
inline Eigen::MatrixXd build_bspline_basis(std::span<const double> x, const BasisSpec& spec) {
  return BSplineBasis::make(spec, x).design(x);
}

// ---------------------------------------------------------------------------
// Penalties

struct PenaltyMatrix {
  Eigen::MatrixXd matrix;
  int null_space_dim = 0;

  /// Relative tolerance for counting null-space eigenvalues.
  static constexpr double kNullTolerance = 1e-9;

  static PenaltyMatrix from(Eigen::MatrixXd m) {
    if (m.rows() != m.cols()) throw Error(ErrorCode::config, "penalty must be square");
    if (m.size() > 0 &&
        (m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff())) {
      throw Error(ErrorCode::config, "penalty must be symmetric");
    }
    PenaltyMatrix out{std::move(m), 0};
    if (out.matrix.size() == 0) return out;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.matrix);
    if (eig.info() != Eigen::Success) throw Error(ErrorCode::numeric, "penalty eigendecomposition failed");
    const double scale = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
      if (eig.eigenvalues()(i) < kNullTolerance * scale) ++out.null_space_dim;
    }
    return out;
  }

  [[nodiscard]] double quadratic_form(const Eigen::VectorXd& beta) const { return beta.dot(matrix * beta); }
};

/// D^T D for the order-th forward-difference operator over k coefficients.
inline PenaltyMatrix difference_penalty(int k, int order) {
  if (order < 1 || order > 2) throw Error(ErrorCode::config, "difference order must be 1 or 2");
  if (order >= k) {
    throw Error(ErrorCode::config, "difference order " + std::to_string(order) +
                                       " needs more than " + std::to_string(order) + " coefficients");
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Identity(k, k);
  for (int o = 0; o < order; ++o) {
    const Eigen::Index rows = d.rows() - 1;
    d = (d.bottomRows(rows) - d.topRows(rows)).eval();
  }
  return PenaltyMatrix::from(d.transpose() * d);
}

inline PenaltyMatrix difference_penalty(const BasisSpec& spec, int order) {
  return difference_penalty(spec.num_basis, order);
}

/// Projector onto the null space of p: adding lambda times this penalty lets a
/// smooth shrink to exactly zero.
inline PenaltyMatrix null_space_penalty(const PenaltyMatrix& p) {
  const Eigen::Index k = p.matrix.rows();
  if (k == 0) return PenaltyMatrix{};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(p.matrix);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::numeric, "null-space eigendecomposition failed");
  const double scale = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::MatrixXd projector = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    if (eig.eigenvalues()(i) < PenaltyMatrix::kNullTolerance * scale) {
      const Eigen::VectorXd u = eig.eigenvectors().col(i);
      projector.noalias() += u * u.transpose();
    }
  }
  projector = 0.5 * (projector + projector.transpose()).eval();
  return PenaltyMatrix::from(std::move(projector));
}

/// Orthonormal k x (k-1) basis Z of the complement of `constraint`, so that
/// any design X with constraint = X^T 1 satisfies (X Z)^T 1 = 0.
inline Eigen::MatrixXd centering_reparameterization(const Eigen::VectorXd& constraint) {
  const Eigen::Index k = constraint.size();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(constraint);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(k, k);
  return q.rightCols(k - 1);
}

// ---------------------------------------------------------------------------
// Tensor product interactions

enum class TensorConstraint { anova_centered };

struct TensorSpec {
  BasisSpec marginal_a;
  BasisSpec marginal_b;
  TensorConstraint constraint = TensorConstraint::anova_centered;
};

/// Row-wise Kronecker product: column ia * kb + ib holds a(:, ia) .* b(:, ib).
inline Eigen::MatrixXd row_kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCode::input, "tensor marginals have mismatched row counts " + std::to_string(a.rows()) +
                                      " vs " + std::to_string(b.rows()));
  }
  Eigen::MatrixXd t(a.rows(), a.cols() * b.cols());
  for (Eigen::Index ia = 0; ia < a.cols(); ++ia) {
    for (Eigen::Index ib = 0; ib < b.cols(); ++ib) {
      t.col(ia * b.cols() + ib) = a.col(ia).cwiseProduct(b.col(ib));
    }
  }
  return t;
}

/// Result of the ANOVA-constrained tensor construction. A new sample row is
/// mapped as (t - m * main_effect_projection) * reparameterization, where t is
/// the row Kronecker product of the marginal rows and m = [1, a, b].
struct TensorBlock {
  Eigen::MatrixXd design;                  ///< n x r constrained block
  Eigen::MatrixXd main_effect_projection;  ///< (1 + ka + kb) x (ka kb)
  Eigen::MatrixXd reparameterization;      ///< (ka kb) x r
  PenaltyMatrix lifted_penalty_a;          ///< S_a kron I_b, (ka kb) square
  PenaltyMatrix lifted_penalty_b;          ///< I_a kron S_b
  PenaltyMatrix penalty_a;                 ///< reparameterized, r x r
  PenaltyMatrix penalty_b;

  [[nodiscard]] Eigen::RowVectorXd map_row(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) const {
    Eigen::RowVectorXd t(a.size() * b.size());
    for (Eigen::Index ia = 0; ia < a.size(); ++ia) {
      for (Eigen::Index ib = 0; ib < b.size(); ++ib) t(ia * b.size() + ib) = a(ia) * b(ib);
    }
    Eigen::RowVectorXd m(1 + a.size() + b.size());
    m << 1.0, a, b;
    return (t - m * main_effect_projection) * reparameterization;
  }
};

inline Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

/// Builds the interaction block from two marginal design blocks on the same
/// samples. Columns are made orthogonal over the samples to the constant and
/// to both marginal main-effect blocks, then rank-reduced.
inline TensorBlock tensor_interaction_basis(const Eigen::MatrixXd& a_block, const Eigen::MatrixXd& b_block,
                                            const TensorSpec& spec, int penalty_order = 2) {
  (void)spec.constraint;
  const Eigen::MatrixXd t = row_kronecker(a_block, b_block);
  const Eigen::Index n = a_block.rows();
  const Eigen::Index ka = a_block.cols();
  const Eigen::Index kb = b_block.cols();

  Eigen::MatrixXd m(n, 1 + ka + kb);
  m << Eigen::VectorXd::Ones(n), a_block, b_block;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(m);
  cod.setThreshold(1e-10);

  TensorBlock out;
  out.main_effect_projection = cod.solve(t);
  const Eigen::MatrixXd residual = t - m * out.main_effect_projection;

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(residual, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const double reference = std::max(t.norm(), 1.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > 1e-9 * reference) ++rank;
  }
  out.reparameterization = svd.matrixV().leftCols(rank);
  out.design = residual * out.reparameterization;

  const auto marginal_penalty = [&](Eigen::Index k) {
    if (k > penalty_order) return difference_penalty(static_cast<int>(k), penalty_order).matrix;
    return Eigen::MatrixXd::Zero(k, k).eval();
  };
  out.lifted_penalty_a = PenaltyMatrix::from(kronecker(marginal_penalty(ka), Eigen::MatrixXd::Identity(kb, kb)));
  out.lifted_penalty_b = PenaltyMatrix::from(kronecker(Eigen::MatrixXd::Identity(ka, ka), marginal_penalty(kb)));
  const Eigen::MatrixXd& z = out.reparameterization;
  Eigen::MatrixXd pa = z.transpose() * out.lifted_penalty_a.matrix * z;
  Eigen::MatrixXd pb = z.transpose() * out.lifted_penalty_b.matrix * z;
  out.penalty_a = PenaltyMatrix::from(0.5 * (pa + pa.transpose()));
  out.penalty_b = PenaltyMatrix::from(0.5 * (pb + pb.transpose()));
  return out;
}

}  // namespace salperc
