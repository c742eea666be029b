#pragma once

// Ordinal (cumulative-logit) generalized additive mixed model: the perception
// model u(s, x, w, v) on a latent importance scale.
//
// The latent predictor is eta = intercept + sum of term contributions; the
// first cut point is pinned at -1 and the remaining ones are parameterized by
// log-increments, so cut points are strictly increasing by construction.
// Smoothing parameters are either fixed or chosen by worker-grouped K-fold
// cross-validation over a grid (coordinate search, ties to the larger value).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"
#include "salperc/model_spec.hpp"
#include "salperc/ordinal_likelihood.hpp"
#include "salperc/records.hpp"
#include "salperc/spline_basis.hpp"

namespace salperc {

/// Random-effect levels used for one prediction; nullopt means "no level"
/// (zero random-effect contribution).
struct GroupLevels {
  std::optional<std::string> worker;
  std::optional<std::string> sentence;
};

inline const std::string& group_value(const RatingRecord& r, Grouping g) {
  return g == Grouping::worker ? r.worker_id : r.sentence_id;
}

inline const std::optional<std::string>& group_value(const GroupLevels& levels, Grouping g) {
  return g == Grouping::worker ? levels.worker : levels.sentence;
}

// ---------------------------------------------------------------------------
// Design blocks

struct SmoothBlock {
  Covariate covariate = Covariate::saliency;
  std::optional<Condition> by;
  BSplineBasis basis;
  Eigen::MatrixXd constraint;  ///< k x (k - 1) centering reparameterization

  /// Constrained basis row at covariate value v (clamped to the basis range).
  [[nodiscard]] Eigen::RowVectorXd row_at(double v) const { return basis.row(v) * constraint; }
};

struct FactorBlock {
  Covariate covariate = Covariate::capitalization;
  std::string reference;
  std::vector<std::string> levels;  ///< non-reference levels, one column each
};

struct TensorEvalBlock {
  Covariate a = Covariate::saliency;
  Covariate b = Covariate::word_length;
  BSplineBasis basis_a;
  BSplineBasis basis_b;
  Eigen::MatrixXd main_effect_projection;
  Eigen::MatrixXd reparameterization;
};

struct RandomBlock {
  Grouping group = Grouping::worker;
  std::optional<Covariate> slope;
  std::vector<std::string> levels;

  [[nodiscard]] std::optional<std::size_t> find(const std::string& level) const {
    const auto it = std::lower_bound(levels.begin(), levels.end(), level);
    if (it == levels.end() || *it != level) return std::nullopt;
    return static_cast<std::size_t>(it - levels.begin());
  }
};

using BlockData = std::variant<SmoothBlock, FactorBlock, TensorEvalBlock, RandomBlock>;

struct ModelBlock {
  std::string label;
  std::size_t term = 0;  ///< index into ModelSpec::terms
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
  BlockData data;
};

/// One quadratic penalty lambda * beta_b^T S beta_b on a block.
struct PenaltySlot {
  std::size_t block = 0;
  std::string name;
  Eigen::MatrixXd matrix;  ///< size x size, already scaled
  double lambda = 1.0;
};

namespace detail {

inline void fill_block_row(const ModelBlock& block, const TokenContext& x, const GroupLevels& groups,
                           Eigen::Ref<Eigen::RowVectorXd> out, bool warn_unknown = true) {
  out.setZero();
  if (block.size == 0) return;
  std::visit(
      [&](const auto& b) {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, SmoothBlock>) {
          if (b.by && x.condition != *b.by) return;
          out = b.row_at(numeric_value(x, b.covariate));
        } else if constexpr (std::is_same_v<T, FactorBlock>) {
          const std::string level = categorical_level(x, b.covariate);
          if (level == b.reference) return;
          const auto it = std::find(b.levels.begin(), b.levels.end(), level);
          if (it == b.levels.end()) {
            if (warn_unknown) {
              warn_once("level:" + block.label + ":" + level, "unknown level '" + level + "' of " + block.label +
                                                                  " mapped to reference level '" + b.reference + "'");
            }
            return;
          }
          out(it - b.levels.begin()) = 1.0;
        } else if constexpr (std::is_same_v<T, TensorEvalBlock>) {
          TensorBlock t;
          t.main_effect_projection = b.main_effect_projection;
          t.reparameterization = b.reparameterization;
          out = t.map_row(b.basis_a.row(numeric_value(x, b.a)), b.basis_b.row(numeric_value(x, b.b)));
        } else {
          const auto& level = group_value(groups, b.group);
          if (!level) return;
          const auto idx = b.find(*level);
          if (!idx) {
            if (warn_unknown) {
              warn_once("group:" + block.label + ":" + *level,
                        "unknown " + std::string(to_string(b.group)) + " '" + *level + "' treated as no level");
            }
            return;
          }
          out(static_cast<Eigen::Index>(*idx)) = b.slope ? numeric_value(x, *b.slope) : 1.0;
        }
      },
      block.data);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Design assembly

/// Design matrix, ratings and penalties for a record set under a model spec.
struct ModelDesign {
  ModelSpec spec;
  std::vector<ModelBlock> blocks;
  std::vector<PenaltySlot> penalties;
  std::vector<std::vector<std::size_t>> term_penalties;  ///< penalty slots per term
  Eigen::Index num_coefficients = 1;                     ///< includes the intercept at 0
  Eigen::MatrixXd X;
  std::vector<int> ratings;
  std::vector<std::string> row_workers;
  std::map<Covariate, Interval> training_ranges;
  std::map<Covariate, std::vector<std::string>> levels;
  std::vector<std::string> workers;
  std::vector<std::string> sentences;
  std::vector<std::string> dropped;  ///< human-readable notes on dropped levels/terms

  [[nodiscard]] Eigen::Index num_params() const { return num_coefficients + spec.categories - 2; }
};

namespace detail {

inline std::vector<double> column(const std::vector<RatingRecord>& records, Covariate c) {
  std::vector<double> v(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) v[i] = numeric_value(records[i].context, c);
  return v;
}

/// Weight of the penalty on the mean of a random-slope block.
inline constexpr double kSlopeCentering = 1e6;

/// Frobenius-norm scaling so that lambda = 1 weighs the penalty like the
/// block's cross-product matrix.
inline double penalty_scale(const Eigen::MatrixXd& block_design, const Eigen::MatrixXd& s) {
  const double sn = s.norm();
  if (sn <= 0.0) return 1.0;
  const double xn = (block_design.transpose() * block_design).norm();
  return xn > 0.0 ? xn / sn : 1.0;
}

inline void add_penalty(ModelDesign& d, std::size_t block, std::string name, const Eigen::MatrixXd& s,
                        const Eigen::MatrixXd& block_design, bool scale) {
  if (s.size() == 0 || s.norm() == 0.0) return;
  PenaltySlot slot;
  slot.block = block;
  slot.name = std::move(name);
  slot.matrix = scale ? (penalty_scale(block_design, s) * s).eval() : s;
  d.penalties.push_back(std::move(slot));
  d.term_penalties[d.blocks[block].term].push_back(d.penalties.size() - 1);
}

}  // namespace detail

inline ModelDesign build_design(const std::vector<RatingRecord>& records, const ModelSpec& spec) {
  validate(spec);
  if (records.empty()) throw Error(ErrorCode::input, "cannot fit a model to zero records");
  for (const auto& r : records) validate(r, spec.categories);

  ModelDesign d;
  d.spec = spec;
  d.term_penalties.resize(spec.terms.size());
  const auto n = static_cast<Eigen::Index>(records.size());
  d.ratings.reserve(records.size());
  for (const auto& r : records) {
    d.ratings.push_back(r.rating);
    d.row_workers.push_back(r.worker_id);
  }
  {
    std::set<std::string> w;
    std::set<std::string> v;
    for (const auto& r : records) {
      w.insert(r.worker_id);
      v.insert(r.sentence_id);
    }
    d.workers.assign(w.begin(), w.end());
    d.sentences.assign(v.begin(), v.end());
  }

  auto range_of = [&](Covariate c) {
    if (auto it = d.training_ranges.find(c); it != d.training_ranges.end()) return it->second;
    const auto v = detail::column(records, c);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    Interval r{*lo, *hi};
    d.training_ranges[c] = r;
    return r;
  };

  std::vector<Eigen::MatrixXd> block_designs;
  for (std::size_t t = 0; t < spec.terms.size(); ++t) {
    ModelBlock block;
    block.label = term_label(spec.terms[t]);
    block.term = t;
    Eigen::MatrixXd bx(n, 0);
    std::visit(
        [&](const auto& term) {
          using T = std::decay_t<decltype(term)>;
          if constexpr (std::is_same_v<T, SmoothTerm>) {
            SmoothBlock sb;
            sb.covariate = term.covariate;
            sb.by = term.by;
            BasisSpec bs = term.basis;
            bs.covariate = std::string(to_string(term.covariate));
            const Interval data_range = range_of(term.covariate);
            if (term.range_from_data) bs.range = data_range;
            if (!(bs.range.lower < bs.range.upper)) {
              d.dropped.push_back(block.label + ": covariate is constant in the data, term dropped");
              warn(d.dropped.back());
              sb.basis = BSplineBasis::make(smooth(term.covariate, bs.num_basis).basis);
              sb.constraint = Eigen::MatrixXd(bs.num_basis, 0);
              block.data = std::move(sb);
              return;
            }
            const auto xs = detail::column(records, term.covariate);
            sb.basis = BSplineBasis::make(bs, xs);
            Eigen::MatrixXd raw = sb.basis.design(xs);
            if (term.by) {
              for (Eigen::Index i = 0; i < n; ++i) {
                if (records[i].context.condition != *term.by) raw.row(i).setZero();
              }
            }
            sb.constraint = centering_reparameterization(raw.colwise().sum().transpose());
            bx = raw * sb.constraint;
            block.data = std::move(sb);
          } else if constexpr (std::is_same_v<T, FactorTerm>) {
            FactorBlock fb;
            fb.covariate = term.covariate;
            std::map<std::string, std::pair<int, int>> extremes;  // level -> (min rating, max rating)
            std::map<std::string, std::size_t> counts;
            for (const auto& r : records) {
              const std::string level = categorical_level(r.context, term.covariate);
              auto [it, inserted] = extremes.try_emplace(level, r.rating, r.rating);
              if (!inserted) {
                it->second.first = std::min(it->second.first, r.rating);
                it->second.second = std::max(it->second.second, r.rating);
              }
              ++counts[level];
            }
            fb.reference = extremes.begin()->first;
            if (term.reference) {
              if (extremes.count(*term.reference)) {
                fb.reference = *term.reference;
              } else {
                warn(block.label + ": reference level '" + *term.reference + "' absent from data, using '" +
                     fb.reference + "'");
              }
            }
            std::vector<std::string> all_levels{fb.reference};
            for (const auto& [level, mm] : extremes) {
              if (level == fb.reference) continue;
              const bool separated = mm.first == mm.second && (mm.first == 1 || mm.first == spec.categories);
              if (separated) {
                d.dropped.push_back(block.label + ": level '" + level + "' has only extreme ratings (" +
                                    std::to_string(counts[level]) + " records), dropped to reference");
                warn(d.dropped.back());
                continue;
              }
              fb.levels.push_back(level);
              all_levels.push_back(level);
            }
            std::sort(all_levels.begin(), all_levels.end());
            d.levels[term.covariate] = all_levels;
            bx = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(fb.levels.size()));
            for (Eigen::Index i = 0; i < n; ++i) {
              const std::string level = categorical_level(records[i].context, term.covariate);
              const auto it = std::find(fb.levels.begin(), fb.levels.end(), level);
              if (it != fb.levels.end()) bx(i, it - fb.levels.begin()) = 1.0;
            }
            block.data = std::move(fb);
          } else if constexpr (std::is_same_v<T, TensorTerm>) {
            TensorEvalBlock tb;
            tb.a = term.a;
            tb.b = term.b;
            const Interval ra = range_of(term.a);
            const Interval rb = range_of(term.b);
            SmoothTerm ma = smooth(term.a, term.k_a);
            SmoothTerm mb = smooth(term.b, term.k_b);
            if (!(ra.lower < ra.upper) || !(rb.lower < rb.upper)) {
              d.dropped.push_back(block.label + ": a marginal covariate is constant, term dropped");
              warn(d.dropped.back());
              tb.basis_a = BSplineBasis::make(ma.basis);
              tb.basis_b = BSplineBasis::make(mb.basis);
              tb.main_effect_projection = Eigen::MatrixXd::Zero(1 + term.k_a + term.k_b, term.k_a * term.k_b);
              tb.reparameterization = Eigen::MatrixXd(term.k_a * term.k_b, 0);
              block.data = std::move(tb);
              return;
            }
            ma.basis.range = ra;
            mb.basis.range = rb;
            tb.basis_a = BSplineBasis::make(ma.basis);
            tb.basis_b = BSplineBasis::make(mb.basis);
            const auto xa = detail::column(records, term.a);
            const auto xb = detail::column(records, term.b);
            TensorSpec ts{ma.basis, mb.basis, TensorConstraint::anova_centered};
            TensorBlock built = tensor_interaction_basis(tb.basis_a.design(xa), tb.basis_b.design(xb), ts);
            tb.main_effect_projection = built.main_effect_projection;
            tb.reparameterization = built.reparameterization;
            bx = built.design;
            block.data = std::move(tb);
          } else {
            RandomBlock rb;
            rb.group = term.group;
            if constexpr (std::is_same_v<T, RandomSlopeTerm>) rb.slope = term.slope;
            rb.levels = term.group == Grouping::worker ? d.workers : d.sentences;
            bx = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(rb.levels.size()));
            for (Eigen::Index i = 0; i < n; ++i) {
              const auto idx = rb.find(group_value(records[i], term.group));
              bx(i, static_cast<Eigen::Index>(*idx)) = rb.slope ? numeric_value(records[i].context, *rb.slope) : 1.0;
            }
            if (rb.slope) range_of(*rb.slope);
            block.data = std::move(rb);
          }
        },
        spec.terms[t]);
    block.size = bx.cols();
    block.offset = d.num_coefficients;
    d.num_coefficients += block.size;
    d.blocks.push_back(std::move(block));
    block_designs.push_back(std::move(bx));
  }

  // Penalties.
  for (std::size_t b = 0; b < d.blocks.size(); ++b) {
    const ModelBlock& block = d.blocks[b];
    if (block.size == 0) continue;
    const Eigen::MatrixXd& bx = block_designs[b];
    std::visit(
        [&](const auto& data) {
          using T = std::decay_t<decltype(data)>;
          if constexpr (std::is_same_v<T, SmoothBlock>) {
            const Eigen::MatrixXd& z = data.constraint;
            Eigen::MatrixXd s = z.transpose() * difference_penalty(data.basis.size(), 2).matrix * z;
            s = 0.5 * (s + s.transpose()).eval();
            detail::add_penalty(d, b, "wiggliness", s, bx, true);
            if (spec.double_penalty) {
              detail::add_penalty(d, b, "null_space", null_space_penalty(PenaltyMatrix::from(s)).matrix, bx, true);
            }
          } else if constexpr (std::is_same_v<T, TensorEvalBlock>) {
            const Eigen::MatrixXd& z = data.reparameterization;
            const Eigen::MatrixXd sa = kronecker(difference_penalty(data.basis_a.size(), 2).matrix,
                                                 Eigen::MatrixXd::Identity(data.basis_b.size(), data.basis_b.size()));
            const Eigen::MatrixXd sb = kronecker(Eigen::MatrixXd::Identity(data.basis_a.size(), data.basis_a.size()),
                                                 difference_penalty(data.basis_b.size(), 2).matrix);
            Eigen::MatrixXd pa = z.transpose() * sa * z;
            Eigen::MatrixXd pb = z.transpose() * sb * z;
            pa = 0.5 * (pa + pa.transpose()).eval();
            pb = 0.5 * (pb + pb.transpose()).eval();
            detail::add_penalty(d, b, "margin_a", pa, bx, true);
            detail::add_penalty(d, b, "margin_b", pb, bx, true);
            if (spec.double_penalty) {
              detail::add_penalty(d, b, "null_space", null_space_penalty(PenaltyMatrix::from(pa + pb)).matrix, bx,
                                  true);
            }
          } else if constexpr (std::is_same_v<T, RandomBlock>) {
            // Unscaled ridge: lambda acts as the inverse variance of the effects.
            detail::add_penalty(d, b, "ridge", Eigen::MatrixXd::Identity(block.size, block.size), bx, false);
            if (data.slope) {
              // Slopes are deviations from the population effect, which lives
              // in the smooth of the same covariate: pin their mean near zero.
              const double q = static_cast<double>(block.size);
              detail::add_penalty(d, b, "centering",
                                  Eigen::MatrixXd::Constant(block.size, block.size, detail::kSlopeCentering / (q * q)), bx, false);
            }
          }
        },
        block.data);
  }

  d.X.resize(n, d.num_coefficients);
  d.X.col(0).setOnes();
  for (std::size_t b = 0; b < d.blocks.size(); ++b) {
    if (d.blocks[b].size > 0) d.X.middleCols(d.blocks[b].offset, d.blocks[b].size) = block_designs[b];
  }
  return d;
}

/// Penalty slot lambdas from per-term values. Smooth: (wiggliness, null space)
/// share the term lambda. Tensor: one lambda per margin, the null-space
/// penalty uses the smaller of the two.
inline std::vector<double> slot_lambdas(const ModelDesign& d, const std::vector<std::array<double, 2>>& term_lambdas) {
  std::vector<double> out(d.penalties.size(), 0.0);
  for (std::size_t s = 0; s < d.penalties.size(); ++s) {
    const PenaltySlot& slot = d.penalties[s];
    const auto& lam = term_lambdas[d.blocks[slot.block].term];
    if (slot.name == "margin_b") {
      out[s] = lam[1];
    } else if (slot.name == "centering") {
      out[s] = 1.0;
    } else if (slot.name == "null_space" && std::holds_alternative<TensorEvalBlock>(d.blocks[slot.block].data)) {
      out[s] = std::min(lam[0], lam[1]);
    } else {
      out[s] = lam[0];
    }
  }
  return out;
}

/// Term lambdas as written in the model spec; selected terms get `fallback`.
inline std::vector<std::array<double, 2>> spec_term_lambdas(const ModelSpec& spec, double fallback) {
  std::vector<std::array<double, 2>> out;
  for (const auto& term : spec.terms) {
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<T, FactorTerm>) {
            out.push_back({0.0, 0.0});
          } else if constexpr (std::is_same_v<T, TensorTerm>) {
            out.push_back(t.lambda ? *t.lambda : std::array<double, 2>{fallback, fallback});
          } else {
            const double v = t.lambda ? *t.lambda : fallback;
            out.push_back({v, v});
          }
        },
        term);
  }
  return out;
}

inline Eigen::MatrixXd combined_penalty(const ModelDesign& d, std::span<const double> lambdas) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d.num_coefficients, d.num_coefficients);
  for (std::size_t i = 0; i < d.penalties.size(); ++i) {
    const PenaltySlot& slot = d.penalties[i];
    const ModelBlock& block = d.blocks[slot.block];
    s.block(block.offset, block.offset, block.size, block.size) += lambdas[i] * slot.matrix;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Penalized objective

/// Penalized negative log-likelihood over params = beta (+) cut increments.
class OrdinalObjective {
 public:
  struct Result {
    double value = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd hessian;  ///< empty unless requested
  };

  OrdinalObjective(const Eigen::MatrixXd& X, std::vector<int> ratings, int categories, Eigen::MatrixXd penalty)
      : X_(X), ratings_(std::move(ratings)), categories_(categories), penalty_(std::move(penalty)) {}

  [[nodiscard]] Eigen::Index num_coefficients() const { return X_.cols(); }
  [[nodiscard]] Eigen::Index size() const { return X_.cols() + categories_ - 2; }
  [[nodiscard]] const Eigen::MatrixXd& penalty() const { return penalty_; }

  [[nodiscard]] double value(const Eigen::VectorXd& params) const { return evaluate(params, false, false).value; }

  [[nodiscard]] Result evaluate(const Eigen::VectorXd& params, bool with_gradient = true,
                                bool with_hessian = false) const {
    const Eigen::Index p = X_.cols();
    const int ninc = categories_ - 2;
    const Eigen::VectorXd beta = params.head(p);
    std::vector<double> inc(params.data() + p, params.data() + p + ninc);
    const std::vector<double> cuts = ordinal::cuts_from_increments(inc);
    const Eigen::VectorXd eta = X_ * beta;
    const Eigen::Index n = X_.rows();

    // Neumaier-compensated sum of -log P.
    double sum = 0.0;
    double comp = 0.0;
    auto accumulate = [&](double v) {
      const double t = sum + v;
      if (std::abs(sum) >= std::abs(v)) {
        comp += (sum - t) + v;
      } else {
        comp += (v - t) + sum;
      }
      sum = t;
    };

    Eigen::VectorXd d_eta(n);
    Eigen::VectorXd w(with_hessian ? n : 0);
    Eigen::MatrixXd cross(with_hessian ? n : 0, std::max(ninc, 0));
    Eigen::VectorXd g_inc = Eigen::VectorXd::Zero(std::max(ninc, 0));
    Eigen::MatrixXd h_inc = Eigen::MatrixXd::Zero(std::max(ninc, 0), std::max(ninc, 0));
    if (with_hessian) cross.setZero();

    std::vector<double> exp_inc(inc.size());
    for (std::size_t j = 0; j < inc.size(); ++j) exp_inc[j] = std::exp(inc[j]);

    for (Eigen::Index i = 0; i < n; ++i) {
      const int r = ratings_[i];
      const ordinal::CategoryTerms t = ordinal::rating_terms(r, eta(i), cuts);
      accumulate(-t.log_prob);
      d_eta(i) = t.d_eta();
      if (!with_gradient && !with_hessian) continue;
      // Cut index c (0-based) depends on increments m < c.
      const int upper = r - 1;  // valid when r < R
      const int lower = r - 2;  // valid when r > 1
      const bool has_upper = r < categories_;
      const bool has_lower = r > 1;
      for (int m = 0; m < ninc; ++m) {
        const double du = (has_upper && m < upper) ? exp_inc[m] : 0.0;
        const double dl = (has_lower && m < lower) ? exp_inc[m] : 0.0;
        g_inc(m) -= t.da * du + t.db * dl;
        if (with_hessian) {
          cross(i, m) = -(t.d_eta_a() * du + t.d_eta_b() * dl);
          // second derivative of the cut with respect to its own increment
          h_inc(m, m) -= t.da * du + t.db * dl;
          for (int m2 = 0; m2 < ninc; ++m2) {
            const double du2 = (has_upper && m2 < upper) ? exp_inc[m2] : 0.0;
            const double dl2 = (has_lower && m2 < lower) ? exp_inc[m2] : 0.0;
            h_inc(m, m2) -= t.daa * du * du2 + t.dab * (du * dl2 + dl * du2) + t.dbb * dl * dl2;
          }
        }
      }
      if (with_hessian) w(i) = std::max(-t.d_eta_eta(), 0.0);
    }

    Result res;
    res.value = sum + comp + 0.5 * beta.dot(penalty_ * beta);
    if (with_gradient || with_hessian) {
      res.gradient.resize(size());
      res.gradient.head(p) = -(X_.transpose() * d_eta) + penalty_ * beta;
      res.gradient.tail(ninc) = g_inc;
      for (Eigen::Index k = 0; k < res.gradient.size(); ++k) {
        if (!std::isfinite(res.gradient(k))) {
          throw Error(ErrorCode::numeric, "non-finite gradient at parameter " + std::to_string(k));
        }
      }
    }
    if (with_hessian) {
      res.hessian.resize(size(), size());
      const Eigen::MatrixXd xw = X_.array().colwise() * w.array().sqrt();
      Eigen::MatrixXd hbb = Eigen::MatrixXd::Zero(p, p);
      hbb.selfadjointView<Eigen::Lower>().rankUpdate(xw.transpose());
      hbb = hbb.selfadjointView<Eigen::Lower>();
      res.hessian.topLeftCorner(p, p) = hbb + penalty_;
      if (ninc > 0) {
        const Eigen::MatrixXd hbd = X_.transpose() * cross;
        res.hessian.topRightCorner(p, ninc) = hbd;
        res.hessian.bottomLeftCorner(ninc, p) = hbd.transpose();
        res.hessian.bottomRightCorner(ninc, ninc) = 0.5 * (h_inc + h_inc.transpose());
      }
    }
    return res;
  }

  /// Sum of log P over all rows (no penalty).
  [[nodiscard]] double log_likelihood(const Eigen::VectorXd& params) const {
    const Eigen::Index p = X_.cols();
    const Eigen::VectorXd beta = params.head(p);
    return -(value(params) - 0.5 * beta.dot(penalty_ * beta));
  }

 private:
  const Eigen::MatrixXd& X_;
  std::vector<int> ratings_;
  int categories_;
  Eigen::MatrixXd penalty_;
};

struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

/// Penalized negative log-likelihood and its analytic gradient at
/// params = beta (+) cut increments; `lambdas` holds one value per penalty slot.
inline ObjectiveValue penalized_neg_loglik(const Eigen::VectorXd& params, const ModelDesign& design,
                                           std::span<const double> lambdas) {
  if (params.size() != design.num_params()) {
    throw Error(ErrorCode::config, "expected " + std::to_string(design.num_params()) + " parameters, got " +
                                       std::to_string(params.size()));
  }
  OrdinalObjective f(design.X, design.ratings, design.spec.categories, combined_penalty(design, lambdas));
  auto r = f.evaluate(params, true, false);
  return {r.value, std::move(r.gradient)};
}

// ---------------------------------------------------------------------------
// Newton optimizer

struct NewtonOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-6;
  double armijo = 1e-4;
};

struct NewtonResult {
  Eigen::VectorXd params;
  Eigen::MatrixXd hessian;  ///< penalized Hessian at the returned point
  int iterations = 0;
  bool converged = false;
  bool damped = false;
  double objective = 0.0;
  double gradient_max = 0.0;
  std::vector<double> objective_trace;  ///< objective after every accepted step
};

inline NewtonResult newton_minimize(const OrdinalObjective& f, Eigen::VectorXd start, const NewtonOptions& options = {}) {
  NewtonResult out;
  out.params = std::move(start);
  auto cur = f.evaluate(out.params, true, true);
  out.objective_trace.push_back(cur.value);
  for (int it = 0; it < options.max_iterations; ++it) {
    out.gradient_max = cur.gradient.cwiseAbs().maxCoeff();
    if (out.gradient_max < options.gradient_tolerance) {
      out.converged = true;
      break;
    }
    ++out.iterations;
    // Levenberg damping when the Hessian is not positive definite.
    const Eigen::Index m = cur.hessian.rows();
    Eigen::VectorXd step;
    double mu = 0.0;
    const double diag_scale = std::max(cur.hessian.diagonal().cwiseAbs().maxCoeff(), 1.0);
    for (int attempt = 0; attempt < 60; ++attempt) {
      Eigen::MatrixXd h = cur.hessian;
      if (mu > 0.0) h.diagonal().array() += mu;
      Eigen::LLT<Eigen::MatrixXd> llt(h);
      if (llt.info() == Eigen::Success) {
        step = llt.solve(-cur.gradient);
        if (step.allFinite()) break;
      }
      mu = mu == 0.0 ? 1e-10 * diag_scale : mu * 10.0;
      out.damped = true;
      step.resize(0);
    }
    if (step.size() != m) throw Error(ErrorCode::numeric, "Newton step could not be computed");

    const double slope = cur.gradient.dot(step);
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd candidate;
    double cand_value = 0.0;
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      candidate = out.params + t * step;
      cand_value = f.value(candidate);
      if (std::isfinite(cand_value) && cand_value <= cur.value + options.armijo * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // At rounding level the Armijo test is uninformative: take the full step
      // if it does not increase the objective and reduces the gradient.
      candidate = out.params + step;
      cand_value = f.value(candidate);
      if (std::isfinite(cand_value) && cand_value <= cur.value) {
        auto trial = f.evaluate(candidate, true, true);
        if (trial.gradient.cwiseAbs().maxCoeff() < out.gradient_max) {
          out.params = candidate;
          cur = std::move(trial);
          out.objective_trace.push_back(cur.value);
          continue;
        }
      }
      break;  // stalled
    }
    out.params = candidate;
    cur = f.evaluate(out.params, true, true);
    out.objective_trace.push_back(cur.value);
  }
  out.gradient_max = cur.gradient.cwiseAbs().maxCoeff();
  if (out.gradient_max < options.gradient_tolerance) out.converged = true;
  out.objective = cur.value;
  out.hessian = std::move(cur.hessian);
  return out;
}

/// Intercept and cut increments matching the marginal rating proportions.
inline Eigen::VectorXd initial_params(const ModelDesign& d, std::span<const Eigen::Index> rows = {}) {
  const int R = d.spec.categories;
  std::vector<double> counts(static_cast<std::size_t>(R), 0.5);  // add-half smoothing
  if (rows.empty()) {
    for (int r : d.ratings) counts[r - 1] += 1.0;
  } else {
    for (Eigen::Index i : rows) counts[d.ratings[i] - 1] += 1.0;
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(R - 1));
  double cum = 0.0;
  for (int j = 0; j < R - 1; ++j) {
    cum += counts[j];
    const double pj = cum / total;
    logits[j] = std::log(pj / (1.0 - pj));
  }
  Eigen::VectorXd params = Eigen::VectorXd::Zero(d.num_params());
  params(0) = ordinal::kFirstCut - logits[0];
  for (int j = 0; j + 1 < R - 1; ++j) {
    params(d.num_coefficients + j) = std::log(std::max(logits[j + 1] - logits[j], 0.05));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Fitted model

struct FitReport {
  int iterations = 0;
  bool converged = false;
  bool damped = false;
  double objective = 0.0;
  double gradient_max = 0.0;
  std::vector<double> objective_trace;
  std::vector<std::string> dropped;
  std::vector<std::string> notes;
};

struct PartialEffect {
  std::string term;
  std::vector<double> grid;
  std::vector<double> fit;
  std::vector<double> se;
  std::vector<double> lower;  ///< fit - 1 se
  std::vector<double> upper;  ///< fit + 1 se
};

struct TermEdf {
  std::string term;
  Eigen::Index size = 0;
  double edf = 0.0;
};

/// Immutable fitted perception model; safe to share between threads.
struct FittedPerceptionModel {
  ModelSpec spec;
  std::vector<ModelBlock> blocks;
  std::vector<PenaltySlot> penalties;
  Eigen::Index num_coefficients = 1;
  Eigen::VectorXd coefficients;
  std::vector<double> cut_points;
  Eigen::MatrixXd penalized_hessian;  ///< over beta (+) cut increments
  std::map<Covariate, Interval> training_ranges;
  std::map<Covariate, std::vector<std::string>> levels;
  std::vector<std::string> workers;
  std::vector<std::string> sentences;
  FitReport report;

  [[nodiscard]] int categories() const { return static_cast<int>(cut_points.size()) + 1; }

  [[nodiscard]] std::vector<double> cut_increments() const {
    std::vector<double> inc(cut_points.size() - 1);
    for (std::size_t j = 0; j + 1 < cut_points.size(); ++j) inc[j] = std::log(cut_points[j + 1] - cut_points[j]);
    return inc;
  }

  [[nodiscard]] Eigen::VectorXd params() const {
    Eigen::VectorXd p(num_coefficients + categories() - 2);
    p.head(num_coefficients) = coefficients;
    const auto inc = cut_increments();
    for (std::size_t j = 0; j < inc.size(); ++j) p(num_coefficients + static_cast<Eigen::Index>(j)) = inc[j];
    return p;
  }

  [[nodiscard]] const ModelBlock* find_block(std::string_view term) const {
    for (const auto& b : blocks) {
      if (b.label == term) return &b;
    }
    // smooth terms may also be addressed by covariate name
    for (const auto& b : blocks) {
      if (const auto* s = std::get_if<SmoothBlock>(&b.data); s && !s->by && to_string(s->covariate) == term) return &b;
    }
    return nullptr;
  }

  [[nodiscard]] std::string available_terms() const {
    std::string out;
    for (const auto& b : blocks) out += (out.empty() ? "" : ", ") + b.label;
    return out;
  }

  /// Full design row (intercept first) for one prediction input.
  [[nodiscard]] Eigen::RowVectorXd design_row(const TokenContext& x, const GroupLevels& groups = {}) const {
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(num_coefficients);
    row(0) = 1.0;
    for (const auto& b : blocks) {
      if (b.size > 0) detail::fill_block_row(b, x, groups, row.segment(b.offset, b.size));
    }
    return row;
  }

  /// Latent predicted importance u(s, x, w, v).
  [[nodiscard]] double predict_latent(double s, const TokenContext& x, const GroupLevels& groups = {}) const {
    TokenContext ctx = x;
    ctx.saliency = s;
    return design_row(ctx, groups).dot(coefficients);
  }

  /// Mean of u(s, x, w, v) over all worker/sentence combinations, computed
  /// through the mean random-effect coefficients (exact by additivity).
  [[nodiscard]] double predict_latent_averaged(double s, const TokenContext& x) const {
    TokenContext ctx = x;
    ctx.saliency = s;
    double eta = design_row(ctx, {}).dot(coefficients);
    for (const auto& b : blocks) {
      const auto* re = std::get_if<RandomBlock>(&b.data);
      if (!re || b.size == 0) continue;
      const double mean = coefficients.segment(b.offset, b.size).mean();
      eta += re->slope ? mean * numeric_value(ctx, *re->slope) : mean;
    }
    return eta;
  }

  [[nodiscard]] std::vector<double> predict_category_probs(double s, const TokenContext& x,
                                                           const GroupLevels& groups = {}) const {
    return ordinal::category_probabilities(predict_latent(s, x, groups), cut_points);
  }

  /// Sum of all penalty slots, embedded in the full parameter space.
  [[nodiscard]] Eigen::MatrixXd full_penalty() const {
    const Eigen::Index m = penalized_hessian.rows();
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(m, m);
    for (const auto& slot : penalties) {
      const ModelBlock& b = blocks[slot.block];
      s.block(b.offset, b.offset, b.size, b.size) += slot.lambda * slot.matrix;
    }
    return s;
  }

  /// Bayesian posterior covariance: inverse of the penalized Hessian.
  [[nodiscard]] Eigen::MatrixXd covariance() const {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(penalized_hessian);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff())) {
      throw Error(ErrorCode::numeric, "penalized Hessian is singular");
    }
    return ldlt.solve(Eigen::MatrixXd::Identity(penalized_hessian.rows(), penalized_hessian.cols()));
  }

  [[nodiscard]] PartialEffect partial_effect(std::string_view term, std::span<const double> grid) const {
    const ModelBlock* block = find_block(term);
    if (!block || !std::holds_alternative<SmoothBlock>(block->data)) {
      throw Error(ErrorCode::not_found, "no univariate smooth '" + std::string(term) + "'; available terms: " +
                                            available_terms());
    }
    const auto& sb = std::get<SmoothBlock>(block->data);
    const Eigen::MatrixXd v =
        block->size > 0 ? covariance().block(block->offset, block->offset, block->size, block->size).eval()
                        : Eigen::MatrixXd();
    PartialEffect pe;
    pe.term = block->label;
    for (double x : grid) {
      double fit = 0.0;
      double se = 0.0;
      if (block->size > 0) {
        const Eigen::RowVectorXd row = sb.row_at(x);
        fit = row.dot(coefficients.segment(block->offset, block->size));
        se = std::sqrt(std::max(0.0, (row * v * row.transpose())(0, 0)));
      }
      pe.grid.push_back(x);
      pe.fit.push_back(fit);
      pe.se.push_back(se);
      pe.lower.push_back(fit - se);
      pe.upper.push_back(fit + se);
    }
    return pe;
  }

  /// Per-term trace of H_pen^{-1} H_unpen over the term's coefficients.
  [[nodiscard]] std::vector<TermEdf> edf() const {
    const Eigen::MatrixXd s = full_penalty();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(penalized_hessian);
    if (ldlt.info() != Eigen::Success ||
        ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-14 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff())) {
      throw Error(ErrorCode::numeric, "penalized Hessian is singular; edf undefined");
    }
    std::vector<TermEdf> out;
    for (const auto& b : blocks) {
      TermEdf e{b.label, b.size, 0.0};
      if (b.size > 0) {
        // H^{-1}(H - S) = I - H^{-1} S
        const Eigen::MatrixXd hs = ldlt.solve(s.middleCols(b.offset, b.size));
        e.edf = static_cast<double>(b.size) - hs.middleRows(b.offset, b.size).trace();
      }
      out.push_back(e);
    }
    return out;
  }

  /// Numeric intervals and categorical level sets the model was trained on,
  /// restricted to covariates the model uses.
  [[nodiscard]] std::vector<Covariate> used_covariates() const {
    std::set<Covariate> used;
    for (const auto& b : blocks) {
      if (b.size == 0) continue;
      std::visit(
          [&](const auto& d) {
            using T = std::decay_t<decltype(d)>;
            if constexpr (std::is_same_v<T, SmoothBlock>) {
              used.insert(d.covariate);
              if (d.by) used.insert(Covariate::condition);
            } else if constexpr (std::is_same_v<T, FactorBlock>) {
              used.insert(d.covariate);
            } else if constexpr (std::is_same_v<T, TensorEvalBlock>) {
              used.insert(d.a);
              used.insert(d.b);
            } else {
              if (d.slope) used.insert(*d.slope);
            }
          },
          b.data);
    }
    return {used.begin(), used.end()};
  }
};

inline double total_edf(const std::vector<TermEdf>& edfs) {
  double total = 0.0;
  for (const auto& e : edfs) total += e.edf;
  return total;
}

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
  NewtonOptions newton;
  std::vector<double> lambda_grid = {1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6};
  int folds = 5;
  int max_sweeps = 3;
  std::uint64_t seed = 0;
};

namespace detail {

inline FittedPerceptionModel assemble_model(const ModelDesign& d, const std::vector<double>& lambdas,
                                            const NewtonResult& nr) {
  FittedPerceptionModel m;
  m.spec = d.spec;
  m.blocks = d.blocks;
  m.penalties = d.penalties;
  for (std::size_t s = 0; s < m.penalties.size(); ++s) m.penalties[s].lambda = lambdas[s];
  m.num_coefficients = d.num_coefficients;
  m.coefficients = nr.params.head(d.num_coefficients);
  std::vector<double> inc(nr.params.data() + d.num_coefficients, nr.params.data() + nr.params.size());
  m.cut_points = ordinal::cuts_from_increments(inc);
  m.penalized_hessian = nr.hessian;
  m.training_ranges = d.training_ranges;
  m.levels = d.levels;
  m.workers = d.workers;
  m.sentences = d.sentences;
  m.report.iterations = nr.iterations;
  m.report.converged = nr.converged;
  m.report.damped = nr.damped;
  m.report.objective = nr.objective;
  m.report.gradient_max = nr.gradient_max;
  m.report.objective_trace = nr.objective_trace;
  m.report.dropped = d.dropped;
  for (std::size_t i = 1; i < m.cut_points.size(); ++i) {
    if (!(m.cut_points[i] > m.cut_points[i - 1])) {
      throw Error(ErrorCode::numeric, "fitted cut points are not strictly increasing");
    }
  }
  return m;
}

/// Fit on a row subset; returns the Newton result.
inline NewtonResult fit_rows(const ModelDesign& d, const std::vector<Eigen::Index>& rows,
                             const std::vector<double>& lambdas, const NewtonOptions& options,
                             const Eigen::VectorXd* warm_start) {
  const Eigen::MatrixXd xs = d.X(rows, Eigen::all);
  std::vector<int> ys(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) ys[i] = d.ratings[rows[i]];
  OrdinalObjective f(xs, std::move(ys), d.spec.categories, combined_penalty(d, lambdas));
  Eigen::VectorXd start = warm_start ? *warm_start : initial_params(d, rows);
  return newton_minimize(f, std::move(start), options);
}

inline double deviance_rows(const ModelDesign& d, const std::vector<Eigen::Index>& rows, const Eigen::VectorXd& params) {
  const Eigen::Index p = d.num_coefficients;
  std::vector<double> inc(params.data() + p, params.data() + params.size());
  const auto cuts = ordinal::cuts_from_increments(inc);
  double dev = 0.0;
  for (Eigen::Index i : rows) {
    const double eta = d.X.row(i).dot(params.head(p));
    dev -= 2.0 * ordinal::rating_terms(d.ratings[i], eta, cuts).log_prob;
  }
  return dev;
}

/// K folds over whole workers; a single worker falls back to row folds.
inline std::vector<int> worker_folds(const ModelDesign& d, int folds, std::uint64_t seed) {
  std::vector<std::string> workers = d.workers;
  std::mt19937_64 rng(seed);
  std::shuffle(workers.begin(), workers.end(), rng);
  std::vector<int> out(d.ratings.size());
  if (workers.size() < 2) {
    warn("smoothing selection: fewer than two workers, folds split individual records");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i % static_cast<std::size_t>(folds));
    return out;
  }
  const int k = std::min<int>(folds, static_cast<int>(workers.size()));
  std::unordered_map<std::string, int> fold_of;
  for (std::size_t i = 0; i < workers.size(); ++i) fold_of[workers[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fold_of.at(d.row_workers[i]);
  return out;
}

inline bool is_random_effect(const Term& term) {
  return std::holds_alternative<RandomInterceptTerm>(term) || std::holds_alternative<RandomSlopeTerm>(term);
}

/// Fellner-Schall updates of the ridge lambdas of random-effect terms with
/// every other lambda held fixed: lambda <- (q - lambda tr(H^-1 S)) / b'Sb.
/// Returns the last full-data fit.
inline NewtonResult update_random_effect_lambdas(const ModelDesign& d, std::vector<std::array<double, 2>>& term_lambdas,
                                                 const std::vector<std::size_t>& terms, const NewtonOptions& options,
                                                 std::optional<Eigen::VectorXd>& warm) {
  constexpr int kMaxIterations = 100;
  constexpr double kMin = 1e-8;
  constexpr double kMax = 1e8;
  NewtonResult nr;
  for (int it = 0; it < kMaxIterations; ++it) {
    const auto lambdas = slot_lambdas(d, term_lambdas);
    OrdinalObjective f(d.X, d.ratings, d.spec.categories, combined_penalty(d, lambdas));
    nr = newton_minimize(f, warm ? *warm : initial_params(d), options);
    warm = nr.params;
    const Eigen::MatrixXd h_inv = nr.hessian.ldlt().solve(Eigen::MatrixXd::Identity(nr.hessian.rows(), nr.hessian.cols()));
    double change = 0.0;
    for (std::size_t t : terms) {
      for (std::size_t slot_index : d.term_penalties[t]) {
        const PenaltySlot& slot = d.penalties[slot_index];
        if (slot.name != "ridge") continue;
        const ModelBlock& block = d.blocks[slot.block];
        const bool centered = std::get<RandomBlock>(block.data).slope.has_value();
        const Eigen::VectorXd b = nr.params.segment(block.offset, block.size);
        const double lambda = term_lambdas[t][0];
        const double bsb = b.dot(slot.matrix * b);
        const double tr = (h_inv.block(block.offset, block.offset, block.size, block.size) * slot.matrix).trace();
        const double numerator = static_cast<double>(block.size - (centered ? 1 : 0)) - lambda * tr;
        double next = numerator > 0.0 && bsb > 0.0 ? numerator / bsb : kMax;
        next = std::clamp(next, kMin, kMax);
        change = std::max(change, std::abs(std::log(next / lambda)));
        term_lambdas[t] = {next, next};
      }
    }
    if (change < 1e-3) break;
  }
  return nr;
}

}  // namespace detail

struct SmoothingSelection {
  /// Selected (lambda, lambda) per term; factor terms hold zeros. Terms with
  /// fixed lambdas keep their values.
  std::vector<std::array<double, 2>> term_lambdas;
  std::vector<double> cv_deviance;  ///< best CV deviance after each accepted move
  int sweeps = 0;
};

/// Coordinate search over the grid per smooth term, scoring each candidate
/// by K-fold cross-validated deviance with folds grouped by worker. Random
/// effect lambdas are estimated before and after the search.
inline SmoothingSelection select_smoothing(const ModelDesign& d, const FitOptions& options) {
  if (options.lambda_grid.empty()) throw Error(ErrorCode::config, "smoothing grid is empty");
  std::vector<double> grid = options.lambda_grid;
  std::sort(grid.begin(), grid.end());
  const double start = grid[(grid.size() - 1) / 2];

  SmoothingSelection sel;
  sel.term_lambdas = spec_term_lambdas(d.spec, start);
  std::vector<std::size_t> selectable;
  std::vector<std::size_t> random_effects;
  for (std::size_t t = 0; t < d.spec.terms.size(); ++t) {
    if (!selects_lambda(d.spec.terms[t]) || d.term_penalties[t].empty()) continue;
    (detail::is_random_effect(d.spec.terms[t]) ? random_effects : selectable).push_back(t);
  }
  if (selectable.empty() && random_effects.empty()) return sel;
  if (grid.size() == 1) {
    for (std::size_t t : selectable) sel.term_lambdas[t] = {grid[0], grid[0]};
    for (std::size_t t : random_effects) sel.term_lambdas[t] = {grid[0], grid[0]};
    return sel;
  }
  // Grouped folds hold out whole workers, so CV cannot score per-worker
  // effects; their variances come from Fellner-Schall updates instead.
  std::optional<Eigen::VectorXd> full_warm;
  if (!random_effects.empty()) {
    for (std::size_t t : random_effects) sel.term_lambdas[t] = {1.0, 1.0};
    detail::update_random_effect_lambdas(d, sel.term_lambdas, random_effects, options.newton, full_warm);
  }
  if (selectable.empty()) return sel;

  const std::vector<int> fold = detail::worker_folds(d, options.folds, options.seed);
  const int k = *std::max_element(fold.begin(), fold.end()) + 1;
  std::vector<std::vector<Eigen::Index>> train(k);
  std::vector<std::vector<Eigen::Index>> test(k);
  for (std::size_t i = 0; i < fold.size(); ++i) {
    for (int f = 0; f < k; ++f) (f == fold[i] ? test[f] : train[f]).push_back(static_cast<Eigen::Index>(i));
  }
  std::vector<std::optional<Eigen::VectorXd>> warm(k);
  std::map<std::vector<double>, double> cache;

  auto cv_score = [&](const std::vector<std::array<double, 2>>& term_lambdas) {
    const auto lambdas = slot_lambdas(d, term_lambdas);
    if (auto it = cache.find(lambdas); it != cache.end()) return it->second;
    double dev = 0.0;
    for (int f = 0; f < k; ++f) {
      const Eigen::VectorXd* ws = warm[f] ? &*warm[f] : nullptr;
      const NewtonResult nr = detail::fit_rows(d, train[f], lambdas, options.newton, ws);
      warm[f] = nr.params;
      dev += detail::deviance_rows(d, test[f], nr.params);
    }
    cache.emplace(lambdas, dev);
    return dev;
  };

  double best = cv_score(sel.term_lambdas);
  sel.cv_deviance.push_back(best);
  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    ++sel.sweeps;
    bool changed = false;
    for (std::size_t t : selectable) {
      const auto current = sel.term_lambdas[t];
      std::array<double, 2> best_value = current;
      double best_dev = best;
      // Largest lambda first so that ties keep the smoother model.
      for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
        auto trial = sel.term_lambdas;
        trial[t] = {*it, *it};
        const double dev = cv_score(trial);
        const double tol = 1e-9 * std::max(1.0, std::abs(best_dev));
        if (dev < best_dev - tol ||
            (std::abs(dev - best_dev) <= tol && *it > best_value[0])) {
          best_dev = dev;
          best_value = {*it, *it};
        }
      }
      if (best_value != current) {
        sel.term_lambdas[t] = best_value;
        best = best_dev;
        sel.cv_deviance.push_back(best);
        changed = true;
      }
    }
    if (!changed) break;
  }
  if (!random_effects.empty()) {
    detail::update_random_effect_lambdas(d, sel.term_lambdas, random_effects, options.newton, full_warm);
  }
  return sel;
}

inline SmoothingSelection select_smoothing(const std::vector<RatingRecord>& records, const ModelSpec& spec,
                                           const FitOptions& options) {
  return select_smoothing(build_design(records, spec), options);
}

/// Copy of spec with the selected lambdas written into every term.
inline ModelSpec with_lambdas(ModelSpec spec, const std::vector<std::array<double, 2>>& term_lambdas) {
  for (std::size_t t = 0; t < spec.terms.size(); ++t) {
    std::visit(
        [&](auto& term) {
          using T = std::decay_t<decltype(term)>;
          if constexpr (std::is_same_v<T, TensorTerm>) {
            term.lambda = term_lambdas[t];
          } else if constexpr (!std::is_same_v<T, FactorTerm>) {
            term.lambda = term_lambdas[t][0];
          }
        },
        spec.terms[t]);
  }
  return spec;
}

inline FittedPerceptionModel fit(const ModelDesign& d, const FitOptions& options = {}) {
  bool any_select = false;
  for (const auto& t : d.spec.terms) any_select = any_select || selects_lambda(t);
  std::vector<std::array<double, 2>> term_lambdas;
  std::vector<std::string> notes;
  if (any_select) {
    const SmoothingSelection sel = select_smoothing(d, options);
    term_lambdas = sel.term_lambdas;
    notes.push_back("smoothing selection: " + std::to_string(sel.sweeps) + " sweep(s)");
  } else {
    term_lambdas = spec_term_lambdas(d.spec, 1.0);
  }
  const auto lambdas = slot_lambdas(d, term_lambdas);
  std::vector<Eigen::Index> all(d.ratings.size());
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  OrdinalObjective f(d.X, d.ratings, d.spec.categories, combined_penalty(d, lambdas));
  const NewtonResult nr = newton_minimize(f, initial_params(d), options.newton);
  FittedPerceptionModel m = detail::assemble_model(d, lambdas, nr);
  m.spec = with_lambdas(d.spec, term_lambdas);
  m.report.notes = std::move(notes);
  if (!nr.converged) {
    m.report.notes.push_back("Newton iterations did not converge (max |gradient| = " +
                             std::to_string(nr.gradient_max) + ")");
    warn(m.report.notes.back());
  }
  if (nr.damped) m.report.notes.push_back("Levenberg damping applied to an indefinite Hessian");
  return m;
}

inline FittedPerceptionModel fit(const std::vector<RatingRecord>& records, const ModelSpec& spec,
                                 const FitOptions& options = {}) {
  return fit(build_design(records, spec), options);
}

}  // namespace salperc
