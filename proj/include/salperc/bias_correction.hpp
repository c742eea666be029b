#pragma once

// Perception bias of a saliency map relative to a reference context, and the
// iterative correction loop that pushes each token's predicted perception
// toward what the same saliency would evoke in the reference context.
//
// Everything here is templated on a perception function u(s, x) returning a
// latent importance, so stub models can stand in for a fitted one.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"
#include "salperc/ordinal_gam.hpp"

namespace salperc {

template <class F>
concept PerceptionFunction = requires(const F& f, double s, const TokenContext& x) {
  { f(s, x) } -> std::convertible_to<double>;
};

/// u(s, x) of a fitted model with random effects averaged over all workers
/// and sentences.
struct AveragedPerception {
  const FittedPerceptionModel* model = nullptr;

  double operator()(double s, const TokenContext& x) const { return model->predict_latent_averaged(s, x); }
};

inline AveragedPerception averaged_perception(const FittedPerceptionModel& m) { return AveragedPerception{&m}; }

// ---------------------------------------------------------------------------
// Reference context

/// Sampling space for reference-context candidates. Covariates not listed
/// keep their TokenContext defaults.
struct CovariateSpace {
  std::map<Covariate, Interval> ranges;
  std::map<Covariate, std::vector<std::string>> levels;
};

/// The training ranges and levels of the covariates the model uses; saliency
/// is excluded because it is fixed at the probe value.
inline CovariateSpace covariate_space(const FittedPerceptionModel& m) {
  CovariateSpace space;
  for (Covariate c : m.used_covariates()) {
    if (c == Covariate::saliency) continue;
    if (is_numeric(c)) {
      if (auto it = m.training_ranges.find(c); it != m.training_ranges.end()) space.ranges[c] = it->second;
    } else if (auto it = m.levels.find(c); it != m.levels.end() && !it->second.empty()) {
      space.levels[c] = it->second;
    }
  }
  return space;
}

struct ReferenceOptions {
  std::size_t samples = 10001;
  double probe_saliency = 0.5;
  std::uint64_t seed = 0;
};

struct ReferenceContext {
  TokenContext context;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  double probe_saliency = 0.5;
  std::size_t candidate_index = 0;  ///< index of the chosen candidate in draw order
  double probe_prediction = 0.0;    ///< u(probe, context), the median prediction
};

/// Candidate i of the reference sample. Draws happen in covariate order, so
/// candidates are reproducible from (space, seed) alone.
inline std::vector<TokenContext> sample_contexts(const CovariateSpace& space, std::size_t n, std::uint64_t seed,
                                                 double probe_saliency) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenContext> out(n);
  for (auto& x : out) {
    x.saliency = probe_saliency;
    for (Covariate c : kAllCovariates) {
      if (auto r = space.ranges.find(c); r != space.ranges.end()) {
        set_numeric(x, c, r->second.lower + unit(rng) * r->second.width());
      } else if (auto l = space.levels.find(c); l != space.levels.end()) {
        const std::size_t pick = std::min(l->second.size() - 1, static_cast<std::size_t>(unit(rng) * l->second.size()));
        set_categorical(x, c, l->second[pick]);
      }
    }
  }
  return out;
}

/// Draws n candidates uniformly from the space and returns the one whose
/// prediction at the probe saliency is the median. Among candidates sharing
/// the median prediction the lowest index wins.
template <PerceptionFunction F>
ReferenceContext select_reference_context(const F& u, const CovariateSpace& space, const ReferenceOptions& options) {
  if (options.samples == 0 || options.samples % 2 == 0) {
    throw Error(ErrorCode::config, "reference sample count must be odd, got " + std::to_string(options.samples));
  }
  const auto candidates = sample_contexts(space, options.samples, options.seed, options.probe_saliency);
  std::vector<double> pred(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) pred[i] = u(options.probe_saliency, candidates[i]);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pred[a] < pred[b]; });
  const double median = pred[order[order.size() / 2]];
  std::size_t chosen = order.size();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == median) {
      chosen = i;
      break;
    }
  }
  ReferenceContext ref;
  ref.context = candidates[chosen];
  ref.sample_count = options.samples;
  ref.seed = options.seed;
  ref.probe_saliency = options.probe_saliency;
  ref.candidate_index = chosen;
  ref.probe_prediction = median;
  return ref;
}

inline ReferenceContext select_reference_context(const FittedPerceptionModel& m, const ReferenceOptions& options) {
  return select_reference_context(averaged_perception(m), covariate_space(m), options);
}

inline nlohmann::json to_json(const ReferenceContext& r) {
  return {{"context", to_json(r.context)},
          {"sample_count", r.sample_count},
          {"seed", r.seed},
          {"probe_saliency", r.probe_saliency},
          {"candidate_index", r.candidate_index},
          {"probe_prediction", r.probe_prediction}};
}

inline ReferenceContext reference_context_from_json(const nlohmann::json& j) {
  ReferenceContext r;
  r.context = token_context_from_json(j.at("context"));
  r.sample_count = j.value("sample_count", std::size_t{0});
  r.seed = j.value("seed", std::uint64_t{0});
  r.probe_saliency = j.value("probe_saliency", 0.5);
  r.candidate_index = j.value("candidate_index", std::size_t{0});
  r.probe_prediction = j.value("probe_prediction", 0.0);
  return r;
}

// ---------------------------------------------------------------------------
// Bias scores

struct TokenBias {
  double p = 0.0;
  double p_ref = 0.0;
  double b = 0.0;
};

/// p = u(s, x_hat), p_ref = u(s, x_ref), b = p - p_ref, both at the same s.
template <PerceptionFunction F>
TokenBias bias_score(const F& u, double s, const TokenContext& x_hat, const TokenContext& x_ref) {
  TokenBias t;
  t.p = u(s, x_hat);
  t.p_ref = u(s, x_ref);
  t.b = t.p - t.p_ref;
  return t;
}

struct BiasReport {
  std::vector<TokenBias> tokens;

  [[nodiscard]] double total_abs() const {
    double sum = 0.0;
    for (const auto& t : tokens) sum += std::abs(t.b);
    return sum;
  }
};

/// Percentage of the initial absolute bias removed; 0 when there was none.
inline double bias_removed_percent(const BiasReport& before, const BiasReport& after) {
  if (before.tokens.size() != after.tokens.size()) {
    throw Error(ErrorCode::input, "bias reports cover " + std::to_string(before.tokens.size()) + " and " +
                                      std::to_string(after.tokens.size()) + " tokens");
  }
  const double b0 = before.total_abs();
  if (b0 == 0.0) return 0.0;
  return 100.0 * (1.0 - after.total_abs() / b0);
}

/// Bias of every token of a sentence under its displayed scores.
template <PerceptionFunction F>
BiasReport sentence_bias(const F& u, const std::vector<TokenContext>& contexts, const TokenContext& x_ref) {
  BiasReport report;
  for (const auto& x : contexts) report.tokens.push_back(bias_score(u, x.saliency, x, x_ref));
  return report;
}

// ---------------------------------------------------------------------------
// Correction loop

struct CorrectionOptions {
  double alpha = 0.05;
  int n_steps = 100;
  double display_index = 1.0;
  Condition condition = Condition::saliency;  ///< condition the corrected map is perceived under
  CapitalizationOptions capitalization;
  /// Called after every single update with (step k, token i, new value).
  std::function<void(int, std::size_t, double)> on_update;
};

struct CorrectionResult {
  SaliencyMap corrected;
  BiasReport before;  ///< p from (s_orig, x_hat_orig)
  BiasReport after;   ///< p from (s_corr, x_hat_corr); p_ref unchanged
  double removed_percent = 0.0;
};

/// Step size of outer iteration k (1-based).
inline double correction_step(double alpha, int k, int n_steps) {
  const double decay = 1.0 - static_cast<double>(k - 1) / static_cast<double>(n_steps);
  return alpha * decay * decay;
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Round-robin correction in document order. Each update rebuilds x_hat_i
/// from the current scores (the saliency rank depends on all of them); the
/// reference prediction p_ref_i = u(s_orig_i, x_ref) is fixed up front.
template <PerceptionFunction F>
CorrectionResult correct_sentence(const F& u, const Sentence& sentence, const SaliencyMap& original,
                                  const TokenContext& x_ref, const Lexicons& lexicons,
                                  const CorrectionOptions& options = {}) {
  if (!(options.alpha > 0.0)) throw Error(ErrorCode::config, "correction step size must be positive");
  if (options.n_steps < 1) throw Error(ErrorCode::config, "correction needs at least one step");
  const std::vector<TokenContext> base =
      extract(sentence, original, options.display_index, lexicons, options.condition, options.capitalization);
  const std::size_t l = base.size();

  CorrectionResult result;
  result.before = sentence_bias(u, base, x_ref);
  std::vector<double> p_ref(l);
  for (std::size_t i = 0; i < l; ++i) p_ref[i] = result.before.tokens[i].p_ref;

  std::vector<double> s = original.scores;
  std::vector<TokenContext> current = base;
  auto refresh = [&](std::size_t i) {
    current[i].saliency = s[i];
    current[i].saliency_rank = saliency_rank(s, i);
  };
  for (int k = 1; k <= options.n_steps; ++k) {
    const double step = correction_step(options.alpha, k, options.n_steps);
    for (std::size_t i = 0; i < l; ++i) {
      refresh(i);
      const double b = u(s[i], current[i]) - p_ref[i];
      s[i] = std::clamp(s[i] - step * sign(b), 0.0, 1.0);
      if (options.on_update) options.on_update(k, i, s[i]);
    }
  }
  for (std::size_t i = 0; i < l; ++i) refresh(i);

  result.corrected = SaliencyMap{original.sentence_id, s};
  for (std::size_t i = 0; i < l; ++i) {
    TokenBias t;
    t.p = u(s[i], current[i]);
    t.p_ref = p_ref[i];
    t.b = t.p - t.p_ref;
    result.after.tokens.push_back(t);
  }
  result.removed_percent = bias_removed_percent(result.before, result.after);
  return result;
}

inline nlohmann::json to_json(const TokenBias& t) { return {{"p", t.p}, {"p_ref", t.p_ref}, {"b", t.b}}; }

inline nlohmann::json to_json(const Sentence& sentence, const SaliencyMap& original, const CorrectionResult& r) {
  nlohmann::json tokens = nlohmann::json::array();
  for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
    tokens.push_back({{"surface", sentence.tokens[i].surface},
                      {"score", original.scores[i]},
                      {"score_corrected", r.corrected.scores[i]},
                      {"before", to_json(r.before.tokens[i])},
                      {"after", to_json(r.after.tokens[i])}});
  }
  return {{"id", sentence.id},
          {"scores", original.scores},
          {"scores_corrected", r.corrected.scores},
          {"tokens", tokens},
          {"total_abs_bias_before", r.before.total_abs()},
          {"total_abs_bias_after", r.after.total_abs()},
          {"removed_percent", r.removed_percent}};
}

}  // namespace salperc
