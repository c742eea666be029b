#pragma once

// Cumulative-logit likelihood pieces: P(y = r) = F(c_r - eta) - F(c_{r-1} - eta)
// with F the logistic CDF, c_0 = -inf and c_R = +inf.

#include <cmath>
#include <span>
#include <vector>

#include "salperc/diagnostics.hpp"

namespace salperc::ordinal {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log F(z), stable for large |z|.
inline double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

/// log P(y = r) and its first and second derivatives with respect to
/// a = c_r - eta and b = c_{r-1} - eta. Missing bounds are flagged by
/// has_upper (r < R) and has_lower (r > 1).
struct CategoryTerms {
  double log_prob = 0.0;
  double da = 0.0;
  double db = 0.0;
  double daa = 0.0;
  double dbb = 0.0;
  double dab = 0.0;

  /// d log P / d eta and friends, since a and b both move with -eta.
  [[nodiscard]] double d_eta() const { return -(da + db); }
  [[nodiscard]] double d_eta_eta() const { return daa + 2.0 * dab + dbb; }
  [[nodiscard]] double d_eta_a() const { return -(daa + dab); }
  [[nodiscard]] double d_eta_b() const { return -(dab + dbb); }
};

inline CategoryTerms category_terms(double a, double b, bool has_upper, bool has_lower) {
  CategoryTerms t;
  if (has_upper && has_lower) {
    // P = F(a) F(-b) (1 - e^{b-a})
    const double gap = -std::expm1(b - a);
    t.log_prob = log_sigmoid(a) + log_sigmoid(-b) + std::log(gap);
    const double ga = std::exp(log_sigmoid(-a) - log_sigmoid(-b)) / gap;
    const double gb = std::exp(log_sigmoid(b) - log_sigmoid(a)) / gap;
    t.da = ga;
    t.db = -gb;
    t.daa = (1.0 - 2.0 * sigmoid(a)) * ga - ga * ga;
    t.dbb = -(1.0 - 2.0 * sigmoid(b)) * gb - gb * gb;
    t.dab = ga * gb;
  } else if (has_upper) {
    t.log_prob = log_sigmoid(a);
    t.da = sigmoid(-a);
    t.daa = -sigmoid(a) * sigmoid(-a);
  } else if (has_lower) {
    t.log_prob = log_sigmoid(-b);
    t.db = -sigmoid(b);
    t.dbb = -sigmoid(b) * sigmoid(-b);
  }
  return t;
}

inline CategoryTerms rating_terms(int rating, double eta, std::span<const double> cuts) {
  const int categories = static_cast<int>(cuts.size()) + 1;
  const bool has_upper = rating < categories;
  const bool has_lower = rating > 1;
  const double a = has_upper ? cuts[rating - 1] - eta : 0.0;
  const double b = has_lower ? cuts[rating - 2] - eta : 0.0;
  return category_terms(a, b, has_upper, has_lower);
}

/// The first cut point is pinned at this value.
inline constexpr double kFirstCut = -1.0;

/// c_1 = -1, c_{j+1} = c_j + exp(delta_j); R - 2 increments give R - 1 cuts.
inline std::vector<double> cuts_from_increments(std::span<const double> increments) {
  std::vector<double> cuts(increments.size() + 1);
  cuts[0] = kFirstCut;
  for (std::size_t j = 0; j < increments.size(); ++j) cuts[j + 1] = cuts[j] + std::exp(increments[j]);
  return cuts;
}

inline std::vector<double> increments_from_cuts(std::span<const double> cuts) {
  if (cuts.empty() || cuts[0] != kFirstCut) {
    throw Error(ErrorCode::config, "first cut point must be exactly -1");
  }
  std::vector<double> inc(cuts.size() - 1);
  for (std::size_t j = 0; j + 1 < cuts.size(); ++j) {
    const double gap = cuts[j + 1] - cuts[j];
    if (!(gap > 0.0)) throw Error(ErrorCode::config, "cut points must be strictly increasing");
    inc[j] = std::log(gap);
  }
  return inc;
}

/// Category probabilities for latent value eta; sums to one.
inline std::vector<double> category_probabilities(double eta, std::span<const double> cuts) {
  const int categories = static_cast<int>(cuts.size()) + 1;
  std::vector<double> p(static_cast<std::size_t>(categories));
  for (int r = 1; r <= categories; ++r) p[r - 1] = std::exp(rating_terms(r, eta, cuts).log_prob);
  return p;
}

}  // namespace salperc::ordinal
