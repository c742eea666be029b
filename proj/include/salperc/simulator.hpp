#pragma once

// Study plans following the rating protocol, and synthetic explainee ratings
// drawn from a known ground-truth perception model.
//
// Random streams are keyed by (seed, sentence, participant) through
// std::seed_seq, so every participant can be generated independently and in
// any order with the same result.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"
#include "salperc/ordinal_likelihood.hpp"
#include "salperc/records.hpp"
#include "salperc/spline_basis.hpp"

namespace salperc {

// ---------------------------------------------------------------------------
// Random streams

inline std::uint32_t fnv1a(std::string_view s) {
  std::uint32_t h = 2166136261u;
  for (unsigned char c : s) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

enum class Stream : std::uint32_t { saliency = 1, plan = 2, worker = 3, sentence = 4, response = 5, corpus = 6 };

inline std::mt19937_64 stream(std::uint64_t seed, Stream kind, std::uint32_t a = 0, std::uint32_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind), a, b};
  return std::mt19937_64(seq);
}

/// I.i.d. uniform scores, reproducible per (seed, sentence id, participant).
inline SaliencyMap random_saliencies(const Sentence& sentence, std::uint64_t seed, std::uint32_t participant = 0) {
  auto rng = stream(seed, Stream::saliency, fnv1a(sentence.id), participant);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SaliencyMap map{sentence.id, std::vector<double>(sentence.tokens.size())};
  for (double& s : map.scores) s = unit(rng);
  return map;
}

// ---------------------------------------------------------------------------
// Ground truth

enum class Shape { linear, square, sine, parabola };

inline std::string_view to_string(Shape s) {
  switch (s) {
    case Shape::linear: return "linear";
    case Shape::square: return "square";
    case Shape::sine: return "sine";
    case Shape::parabola: return "parabola";
  }
  return "linear";
}

inline Shape shape_from_string(std::string_view s) {
  if (s == "linear") return Shape::linear;
  if (s == "square") return Shape::square;
  if (s == "sine") return Shape::sine;
  if (s == "parabola") return Shape::parabola;
  throw Error(ErrorCode::config, "unknown latent shape '" + std::string(s) + "'");
}

/// amplitude * shape(t) with t the covariate rescaled from domain to [0, 1]:
/// linear t, square t^2, sine sin(pi t), parabola (2t - 1)^2.
struct LatentFunction {
  Covariate covariate = Covariate::saliency;
  Shape shape = Shape::linear;
  double amplitude = 1.0;
  Interval domain{0.0, 1.0};
  std::optional<Condition> only_condition;

  [[nodiscard]] double operator()(double v) const {
    const double t = (domain.clamp(v) - domain.lower) / domain.width();
    switch (shape) {
      case Shape::linear: return amplitude * t;
      case Shape::square: return amplitude * t * t;
      case Shape::sine: return amplitude * std::sin(std::numbers::pi * t);
      case Shape::parabola: return amplitude * (2.0 * t - 1.0) * (2.0 * t - 1.0);
    }
    return 0.0;
  }
};

struct FactorEffect {
  Covariate covariate = Covariate::capitalization;
  std::map<std::string, double> effects;  ///< missing levels contribute 0
};

struct GroundTruthModel {
  double intercept = 4.0;
  std::vector<LatentFunction> functions;
  std::vector<FactorEffect> factors;
  std::vector<double> cut_points = {-1.0, 1.31, 3.29, 5.15, 7.1, 9.22};
  double worker_intercept_sd = 0.5;
  double worker_slope_sd = 0.3;
  double sentence_intercept_sd = 0.3;
  double sentence_slope_sd = 0.0;
  double completion_median_s = 6.0;
  double completion_log_sd = 0.9;

  [[nodiscard]] int categories() const { return static_cast<int>(cut_points.size()) + 1; }

  /// Fixed-effect part of the latent predictor.
  [[nodiscard]] double eta(const TokenContext& x) const {
    double v = intercept;
    for (const auto& f : functions) {
      if (f.only_condition && *f.only_condition != x.condition) continue;
      v += f(numeric_value(x, f.covariate));
    }
    for (const auto& f : factors) {
      if (auto it = f.effects.find(categorical_level(x, f.covariate)); it != f.effects.end()) v += it->second;
    }
    return v;
  }
};

inline void validate(const GroundTruthModel& gt) {
  if (gt.cut_points.empty()) throw Error(ErrorCode::config, "ground truth needs at least one cut point");
  for (std::size_t i = 1; i < gt.cut_points.size(); ++i) {
    if (!(gt.cut_points[i] > gt.cut_points[i - 1])) {
      throw Error(ErrorCode::config, "ground-truth cut points must be strictly increasing");
    }
  }
  for (double sd : {gt.worker_intercept_sd, gt.worker_slope_sd, gt.sentence_intercept_sd, gt.sentence_slope_sd}) {
    if (!(sd >= 0.0)) throw Error(ErrorCode::config, "random-effect standard deviations must be >= 0");
  }
  for (const auto& f : gt.functions) {
    if (!is_numeric(f.covariate)) throw Error(ErrorCode::config, "latent functions need numeric covariates");
    if (!(f.domain.lower < f.domain.upper)) throw Error(ErrorCode::config, "latent function domain is empty");
  }
  if (!(gt.completion_median_s > 0.0) || !(gt.completion_log_sd >= 0.0)) {
    throw Error(ErrorCode::config, "completion-time distribution parameters are invalid");
  }
}

/// Saliency raises perceived importance quadratically, word length adds a
/// hump, and a learning effect over the session bends the display index.
inline GroundTruthModel default_ground_truth() {
  GroundTruthModel gt;
  gt.functions = {
      {Covariate::saliency, Shape::square, 5.0, {0.0, 1.0}, std::nullopt},
      {Covariate::word_length, Shape::sine, 1.2, {1.0, 15.0}, std::nullopt},
      {Covariate::display_index, Shape::parabola, -1.5, {1.0, 153.0}, std::nullopt},
  };
  return gt;
}

inline nlohmann::json to_json(const GroundTruthModel& gt) {
  nlohmann::json fs = nlohmann::json::array();
  for (const auto& f : gt.functions) {
    fs.push_back({{"covariate", to_string(f.covariate)},
                  {"shape", to_string(f.shape)},
                  {"amplitude", f.amplitude},
                  {"domain", {f.domain.lower, f.domain.upper}},
                  {"condition", f.only_condition ? nlohmann::json(to_string(*f.only_condition)) : nlohmann::json(nullptr)}});
  }
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& f : gt.factors) factors.push_back({{"covariate", to_string(f.covariate)}, {"effects", f.effects}});
  return {{"intercept", gt.intercept},
          {"functions", fs},
          {"factors", factors},
          {"cut_points", gt.cut_points},
          {"worker_intercept_sd", gt.worker_intercept_sd},
          {"worker_slope_sd", gt.worker_slope_sd},
          {"sentence_intercept_sd", gt.sentence_intercept_sd},
          {"sentence_slope_sd", gt.sentence_slope_sd},
          {"completion_median_s", gt.completion_median_s},
          {"completion_log_sd", gt.completion_log_sd}};
}

inline GroundTruthModel ground_truth_from_json(const nlohmann::json& j) {
  GroundTruthModel gt;
  try {
    gt.intercept = j.value("intercept", gt.intercept);
    if (j.contains("functions")) {
      for (const auto& f : j["functions"]) {
        LatentFunction lf;
        lf.covariate = covariate_from_string(f.at("covariate").get<std::string>());
        lf.shape = shape_from_string(f.value("shape", std::string("linear")));
        lf.amplitude = f.value("amplitude", 1.0);
        if (f.contains("domain")) lf.domain = {f["domain"][0].get<double>(), f["domain"][1].get<double>()};
        if (f.contains("condition") && !f["condition"].is_null()) {
          lf.only_condition = condition_from_string(f["condition"].get<std::string>());
        }
        gt.functions.push_back(lf);
      }
    }
    if (j.contains("factors")) {
      for (const auto& f : j["factors"]) {
        gt.factors.push_back({covariate_from_string(f.at("covariate").get<std::string>()),
                              f.at("effects").get<std::map<std::string, double>>()});
      }
    }
    gt.cut_points = j.value("cut_points", gt.cut_points);
    gt.worker_intercept_sd = j.value("worker_intercept_sd", gt.worker_intercept_sd);
    gt.worker_slope_sd = j.value("worker_slope_sd", gt.worker_slope_sd);
    gt.sentence_intercept_sd = j.value("sentence_intercept_sd", gt.sentence_intercept_sd);
    gt.sentence_slope_sd = j.value("sentence_slope_sd", gt.sentence_slope_sd);
    gt.completion_median_s = j.value("completion_median_s", gt.completion_median_s);
    gt.completion_log_sd = j.value("completion_log_sd", gt.completion_log_sd);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::config, std::string("malformed ground-truth document: ") + e.what());
  }
  validate(gt);
  return gt;
}

/// Rating from the cumulative-logit model: latent eta plus standard logistic
/// noise, thresholded at the cut points.
template <class Rng>
int sample_rating(double eta, std::span<const double> cuts, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  while (u <= 0.0) u = unit(rng);
  const double z = eta + std::log(u / (1.0 - u));
  int r = 1;
  for (double c : cuts) r += z > c ? 1 : 0;
  return r;
}

// ---------------------------------------------------------------------------
// Study plans

enum class PlanMode { single_condition, within_subject };

inline std::string_view to_string(PlanMode m) {
  return m == PlanMode::within_subject ? "within_subject" : "single_condition";
}

inline PlanMode plan_mode_from_string(std::string_view s) {
  if (s == "single_condition" || s == "single") return PlanMode::single_condition;
  if (s == "within_subject" || s == "within") return PlanMode::within_subject;
  throw Error(ErrorCode::config, "unknown plan mode '" + std::string(s) + "'");
}

inline constexpr std::size_t kTrapCount = 3;

/// An attention check: a sentence asking for one specific rating of its
/// target word. Honest raters give exactly that rating.
struct TrapSentence {
  Sentence sentence;
  std::size_t target = 0;
  int expected_rating = 7;
};

inline std::vector<TrapSentence> default_traps() {
  auto make = [](std::string id, std::vector<std::string> words, std::size_t target, int expected) {
    Sentence s;
    s.id = std::move(id);
    for (auto& w : words) s.tokens.push_back({std::move(w), std::nullopt, std::nullopt, std::nullopt});
    return TrapSentence{std::move(s), target, expected};
  };
  return {make("trap-1", {"Please", "rate", "this", "word", "as", "very", "important", "."}, 3, 7),
          make("trap-2", {"Please", "rate", "this", "word", "as", "not", "important", "at", "all", "."}, 3, 1),
          make("trap-3", {"This", "check", "expects", "the", "highest", "rating", "for", "this", "word", "."}, 8, 7)};
}

struct PlanItem {
  std::string sentence_id;
  std::size_t sentence_index = 0;  ///< into StudyPlan::sentences, or into traps when is_trap
  bool is_trap = false;
  std::size_t target = 0;          ///< 0-based target token
  Condition condition = Condition::saliency;
  SaliencyMap saliency;            ///< random scores the explanation conveys
  SaliencyMap displayed;           ///< scores actually drawn (corrected in the corrected condition)
  int expected_rating = 0;         ///< traps only
};

struct ParticipantPlan {
  std::string worker_id;
  std::vector<std::size_t> order;  ///< permutation of sentence indices
  std::vector<PlanItem> items;     ///< full sequence including traps
  std::array<std::size_t, kTrapCount> trap_positions{};  ///< 0-based positions in items
  std::array<Condition, 3> condition_order{Condition::saliency, Condition::corrected, Condition::bars};
  std::size_t ordering = 0;        ///< index into condition_orderings()
};

struct StudyPlan {
  std::string study_id = "study";
  PlanMode mode = PlanMode::single_condition;
  Condition condition = Condition::saliency;  ///< single-condition mode
  std::uint64_t seed = 0;
  std::vector<Sentence> sentences;
  std::vector<TrapSentence> traps;
  std::vector<ParticipantPlan> participants;
};

/// The six orders of the three visualization conditions.
inline const std::array<std::array<Condition, 3>, 6>& condition_orderings() {
  using C = Condition;
  static const std::array<std::array<Condition, 3>, 6> orders = {{{C::saliency, C::corrected, C::bars},
                                                                   {C::saliency, C::bars, C::corrected},
                                                                   {C::corrected, C::saliency, C::bars},
                                                                   {C::corrected, C::bars, C::saliency},
                                                                   {C::bars, C::saliency, C::corrected},
                                                                   {C::bars, C::corrected, C::saliency}}};
  return orders;
}

/// Number of real sentences that must precede every trap: traps sit in the
/// last two thirds of the session.
inline std::size_t trap_min_preceding(std::size_t n_sentences) { return (n_sentences + 2) / 3; }

/// Produces the displayed map for an item in the corrected condition.
using Corrector = std::function<SaliencyMap(const Sentence&, const SaliencyMap&, double display_index)>;

struct PlanOptions {
  std::string study_id = "study";
  std::size_t participants = 1;
  PlanMode mode = PlanMode::single_condition;
  Condition condition = Condition::saliency;
  std::uint64_t seed = 0;
  std::vector<TrapSentence> traps = default_traps();
  Corrector corrector;  ///< without one, corrected items show the random scores
};

inline std::string worker_id_for(std::size_t participant) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "w%04zu", participant + 1);
  return buf;
}

inline ParticipantPlan make_participant_plan(const std::vector<Sentence>& sentences, std::size_t p,
                                             const PlanOptions& options) {
  const std::size_t n = sentences.size();
  ParticipantPlan pp;
  pp.worker_id = worker_id_for(p);
  auto rng = stream(options.seed, Stream::plan, static_cast<std::uint32_t>(p));
  pp.order.resize(n);
  std::iota(pp.order.begin(), pp.order.end(), std::size_t{0});
  if (options.mode == PlanMode::single_condition) std::shuffle(pp.order.begin(), pp.order.end(), rng);
  pp.ordering = p % 6;
  pp.condition_order = condition_orderings()[pp.ordering];

  // Trap slots: trap k goes after gaps[k] real sentences.
  std::vector<std::size_t> gaps;
  for (std::size_t g = trap_min_preceding(n); g <= n; ++g) gaps.push_back(g);
  std::vector<std::size_t> chosen;
  std::sample(gaps.begin(), gaps.end(), std::back_inserter(chosen), kTrapCount, rng);
  std::sort(chosen.begin(), chosen.end());

  std::size_t next_trap = 0;
  auto condition_of = [&](std::size_t real_index) {
    if (options.mode == PlanMode::single_condition) return options.condition;
    return pp.condition_order[std::min<std::size_t>(2, real_index / (n / 3))];
  };
  auto push_trap = [&](Condition c) {
    const std::size_t t = next_trap % options.traps.size();
    const TrapSentence& trap = options.traps[t];
    PlanItem item;
    item.sentence_id = trap.sentence.id;
    item.sentence_index = t;
    item.is_trap = true;
    item.target = trap.target;
    item.condition = c;
    item.saliency.sentence_id = trap.sentence.id;
    item.saliency.scores.assign(trap.sentence.tokens.size(), 0.0);
    item.saliency.scores[trap.target] = 1.0;
    item.displayed = item.saliency;
    item.expected_rating = trap.expected_rating;
    pp.trap_positions[next_trap] = pp.items.size();
    pp.items.push_back(std::move(item));
    ++next_trap;
  };
  for (std::size_t k = 0; k < n; ++k) {
    const Sentence& s = sentences[pp.order[k]];
    PlanItem item;
    item.sentence_id = s.id;
    item.sentence_index = pp.order[k];
    item.condition = condition_of(k);
    item.saliency = random_saliencies(s, options.seed, static_cast<std::uint32_t>(p));
    auto target_rng = stream(options.seed, Stream::saliency, fnv1a(s.id) ^ 0x9e3779b9u, static_cast<std::uint32_t>(p));
    item.target = std::uniform_int_distribution<std::size_t>(0, s.tokens.size() - 1)(target_rng);
    const double display_index = static_cast<double>(pp.items.size() + 1);
    item.displayed = item.condition == Condition::corrected && options.corrector
                         ? options.corrector(s, item.saliency, display_index)
                         : item.saliency;
    pp.items.push_back(std::move(item));
    while (next_trap < kTrapCount && chosen[next_trap] == k + 1) push_trap(condition_of(k));
  }
  return pp;
}

/// Single-condition plans shuffle the sentence order per participant;
/// within-subject plans keep it fixed and rotate the six condition orders.
inline StudyPlan make_study_plan(const std::vector<Sentence>& sentences, const PlanOptions& options) {
  const std::size_t n = sentences.size();
  if (n == 0) throw Error(ErrorCode::config, "study plan needs at least one sentence");
  if (options.participants == 0) throw Error(ErrorCode::config, "study plan needs at least one participant");
  if (options.mode == PlanMode::within_subject && n % 3 != 0) {
    throw Error(ErrorCode::config, "within-subject plans need a sentence count divisible by 3, got " + std::to_string(n));
  }
  if (options.traps.empty()) throw Error(ErrorCode::config, "study plan needs trap sentences");
  if (n - trap_min_preceding(n) + 1 < kTrapCount) {
    throw Error(ErrorCode::config, "too few sentences to place " + std::to_string(kTrapCount) +
                                       " traps in the last two thirds");
  }
  if (options.condition == Condition::corrected && options.mode == PlanMode::single_condition && !options.corrector) {
    warn("corrected condition without a perception model: items show the uncorrected scores");
  }
  if (options.mode == PlanMode::within_subject && !options.corrector) {
    warn_once("plan-no-corrector", "corrected condition without a perception model: items show the uncorrected scores");
  }
  for (const auto& s : sentences) {
    if (s.tokens.empty()) throw Error(ErrorCode::input, "sentence '" + s.id + "' has no tokens");
  }
  StudyPlan plan;
  plan.study_id = options.study_id;
  plan.mode = options.mode;
  plan.condition = options.condition;
  plan.seed = options.seed;
  plan.sentences = sentences;
  plan.traps = options.traps;
  for (std::size_t p = 0; p < options.participants; ++p) {
    plan.participants.push_back(make_participant_plan(sentences, p, options));
  }
  return plan;
}

/// Sentence for an item, whether trap or real.
inline const Sentence& item_sentence(const StudyPlan& plan, const PlanItem& item) {
  return item.is_trap ? plan.traps[item.sentence_index].sentence : plan.sentences[item.sentence_index];
}

/// Checks the protocol invariants; returns an empty string when all hold.
inline std::string check_plan(const StudyPlan& plan) {
  const std::size_t n = plan.sentences.size();
  for (const auto& pp : plan.participants) {
    const std::string who = pp.worker_id + ": ";
    if (pp.items.size() != n + kTrapCount) return who + "wrong item count";
    std::vector<std::size_t> sorted = pp.order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (sorted[i] != i) return who + "sentence order is not a permutation";
    }
    std::size_t traps = 0;
    std::size_t real_before = 0;
    std::map<Condition, std::size_t> per_condition;
    for (std::size_t pos = 0; pos < pp.items.size(); ++pos) {
      const PlanItem& item = pp.items[pos];
      if (item.is_trap) {
        if (traps >= kTrapCount || pp.trap_positions[traps] != pos) return who + "trap positions disagree";
        if (real_before < trap_min_preceding(n)) return who + "trap in the first third";
        ++traps;
      } else {
        if (item.sentence_index != pp.order[real_before]) return who + "items do not follow the order";
        ++per_condition[item.condition];
        ++real_before;
      }
    }
    if (traps != kTrapCount) return who + "expected exactly 3 traps";
    if (plan.mode == PlanMode::within_subject) {
      for (std::size_t i = 0; i < n; ++i) {
        if (pp.order[i] != i) return who + "within-subject order must be fixed";
      }
      for (Condition c : {Condition::saliency, Condition::corrected, Condition::bars}) {
        if (per_condition[c] != n / 3) return who + "unbalanced conditions";
      }
    }
  }
  return {};
}

inline nlohmann::json to_json(const SaliencyMap& m) { return {{"sentence_id", m.sentence_id}, {"scores", m.scores}}; }

inline SaliencyMap saliency_map_from_json(const nlohmann::json& j) {
  return {j.at("sentence_id").get<std::string>(), j.at("scores").get<std::vector<double>>()};
}

inline nlohmann::json to_json(const StudyPlan& plan) {
  nlohmann::json sentences = nlohmann::json::array();
  for (const auto& s : plan.sentences) sentences.push_back(to_json(s));
  nlohmann::json traps = nlohmann::json::array();
  for (const auto& t : plan.traps) {
    traps.push_back({{"sentence", to_json(t.sentence)}, {"target", t.target}, {"expected_rating", t.expected_rating}});
  }
  nlohmann::json participants = nlohmann::json::array();
  for (const auto& pp : plan.participants) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : pp.items) {
      items.push_back({{"sentence_id", it.sentence_id},
                       {"sentence_index", it.sentence_index},
                       {"is_trap", it.is_trap},
                       {"target", it.target},
                       {"condition", to_string(it.condition)},
                       {"saliency", it.saliency.scores},
                       {"displayed", it.displayed.scores},
                       {"expected_rating", it.expected_rating}});
    }
    nlohmann::json conds = nlohmann::json::array();
    for (Condition c : pp.condition_order) conds.push_back(to_string(c));
    participants.push_back({{"worker_id", pp.worker_id},
                            {"order", pp.order},
                            {"trap_positions", pp.trap_positions},
                            {"condition_order", conds},
                            {"ordering", pp.ordering},
                            {"items", items}});
  }
  return {{"study_id", plan.study_id},
          {"mode", to_string(plan.mode)},
          {"condition", to_string(plan.condition)},
          {"seed", plan.seed},
          {"sentences", sentences},
          {"traps", traps},
          {"participants", participants}};
}

inline StudyPlan study_plan_from_json(const nlohmann::json& j) {
  StudyPlan plan;
  try {
    plan.study_id = j.at("study_id").get<std::string>();
    plan.mode = plan_mode_from_string(j.at("mode").get<std::string>());
    plan.condition = condition_from_string(j.value("condition", std::string("saliency")));
    plan.seed = j.value("seed", std::uint64_t{0});
    for (const auto& s : j.at("sentences")) plan.sentences.push_back(sentence_from_json(s));
    for (const auto& t : j.at("traps")) {
      plan.traps.push_back({sentence_from_json(t.at("sentence")), t.at("target").get<std::size_t>(),
                            t.at("expected_rating").get<int>()});
    }
    for (const auto& pj : j.at("participants")) {
      ParticipantPlan pp;
      pp.worker_id = pj.at("worker_id").get<std::string>();
      pp.order = pj.at("order").get<std::vector<std::size_t>>();
      pp.trap_positions = pj.at("trap_positions").get<std::array<std::size_t, kTrapCount>>();
      const auto conds = pj.at("condition_order").get<std::vector<std::string>>();
      for (std::size_t i = 0; i < 3 && i < conds.size(); ++i) pp.condition_order[i] = condition_from_string(conds[i]);
      pp.ordering = pj.value("ordering", std::size_t{0});
      for (const auto& ij : pj.at("items")) {
        PlanItem it;
        it.sentence_id = ij.at("sentence_id").get<std::string>();
        it.sentence_index = ij.at("sentence_index").get<std::size_t>();
        it.is_trap = ij.at("is_trap").get<bool>();
        it.target = ij.at("target").get<std::size_t>();
        it.condition = condition_from_string(ij.at("condition").get<std::string>());
        it.saliency = {it.sentence_id, ij.at("saliency").get<std::vector<double>>()};
        it.displayed = {it.sentence_id, ij.at("displayed").get<std::vector<double>>()};
        it.expected_rating = ij.value("expected_rating", 0);
        pp.items.push_back(std::move(it));
      }
      plan.participants.push_back(std::move(pp));
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::input, std::string("malformed study plan: ") + e.what());
  }
  const std::string problem = check_plan(plan);
  if (!problem.empty()) throw Error(ErrorCode::input, "study plan violates the protocol: " + problem);
  return plan;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticCorpus {
  std::vector<Sentence> sentences;
  Lexicons lexicons;
  std::vector<std::pair<std::string, double>> frequency_rows;  ///< raw counts, for writing TSVs
  std::vector<std::pair<std::string, double>> sentiment_rows;
};

/// Sentences of pseudo-words with varied lengths, capitalization and
/// dependency labels; each word is unique within its sentence.
inline SyntheticCorpus make_synthetic_corpus(std::size_t n_sentences, std::uint64_t seed, std::size_t min_len = 6,
                                             std::size_t max_len = 20) {
  if (min_len < 1 || max_len < min_len) throw Error(ErrorCode::config, "invalid synthetic sentence length range");
  auto rng = stream(seed, Stream::corpus);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  static const char* const deprels[] = {"nsubj", "obj", "det", "amod", "advmod", "root", "case", "punct", "nmod"};
  const std::size_t vocab_size = 400;
  std::vector<std::string> vocab;
  std::set<std::string> seen;
  SyntheticCorpus corpus;
  while (vocab.size() < vocab_size) {
    // Word lengths 1..19, skewed toward short words.
    const int len = 1 + static_cast<int>(std::floor(std::pow(unit(rng), 1.6) * 19.0));
    std::string w;
    for (int i = 0; i < len; ++i) w += static_cast<char>('a' + static_cast<int>(unit(rng) * 26.0) % 26);
    if (!seen.insert(w).second) continue;
    vocab.push_back(w);
    const double rank = static_cast<double>(vocab.size());
    corpus.frequency_rows.emplace_back(w, std::floor(100000.0 / rank));
    if (unit(rng) < 0.3) corpus.sentiment_rows.emplace_back(w, std::round((2.0 * unit(rng) - 1.0) * 1000.0) / 1000.0);
  }
  for (const auto& [term, value] : corpus.frequency_rows) corpus.lexicons.frequency.set(term, value / 100000.0);
  for (const auto& [term, value] : corpus.sentiment_rows) corpus.lexicons.sentiment.set(term, value);

  for (std::size_t s = 0; s < n_sentences; ++s) {
    Sentence sentence;
    char id[32];
    std::snprintf(id, sizeof(id), "syn-%04zu", s + 1);
    sentence.id = id;
    const std::size_t len = min_len + static_cast<std::size_t>(unit(rng) * (max_len - min_len + 1)) % (max_len - min_len + 1);
    std::set<std::size_t> used;
    while (sentence.tokens.size() < len) {
      const auto pick = static_cast<std::size_t>(std::pow(unit(rng), 2.0) * vocab_size) % vocab_size;
      if (!used.insert(pick).second) continue;
      std::string surface = vocab[pick];
      const double c = unit(rng);
      if (c < 0.1) {
        for (char& ch : surface) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
      } else if (c < 0.3 || sentence.tokens.empty()) {
        surface[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(surface[0])));
      }
      const char* rel = deprels[static_cast<std::size_t>(unit(rng) * 9.0) % 9];
      sentence.tokens.push_back({surface, vocab[pick], std::string(rel), std::nullopt});
    }
    corpus.sentences.push_back(std::move(sentence));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Simulated ratings

enum class Persona { honest, clicker };

struct TrapOutcome {
  std::string worker_id;
  std::size_t position = 0;
  int rating = 0;
  bool passed = false;
};

struct SimulationOptions {
  std::uint64_t seed = 0;
  std::set<std::string> clickers;  ///< workers answering uniformly at random
};

struct SimulationResult {
  std::vector<RatingRecord> records;
  std::vector<TrapOutcome> traps;

  /// Workers who failed every trap they answered.
  [[nodiscard]] std::set<std::string> trap_failed_workers() const {
    std::map<std::string, std::pair<int, int>> tally;  // answered, failed
    for (const auto& t : traps) {
      auto& [answered, failed] = tally[t.worker_id];
      ++answered;
      failed += t.passed ? 0 : 1;
    }
    std::set<std::string> out;
    for (const auto& [w, c] : tally) {
      if (c.first > 0 && c.first == c.second) out.insert(w);
    }
    return out;
  }
};

struct RandomEffects {
  double intercept = 0.0;
  double slope = 0.0;
};

inline RandomEffects draw_effects(std::uint64_t seed, Stream kind, std::uint32_t key, double sd_intercept,
                                  double sd_slope) {
  auto rng = stream(seed, kind, key);
  std::normal_distribution<double> normal(0.0, 1.0);
  RandomEffects e;
  e.intercept = sd_intercept * normal(rng);
  e.slope = sd_slope * normal(rng);
  return e;
}

/// Ratings for every item of the plan. The record's context carries the
/// random scores the explanation conveys; the display index counts every
/// item shown so far, traps included.
inline SimulationResult simulate_ratings(const GroundTruthModel& gt, const StudyPlan& plan, const Lexicons& lexicons,
                                         const SimulationOptions& options) {
  validate(gt);
  SimulationResult result;
  std::map<std::string, RandomEffects> sentence_effects;
  for (const auto& s : plan.sentences) {
    sentence_effects[s.id] =
        draw_effects(options.seed, Stream::sentence, fnv1a(s.id), gt.sentence_intercept_sd, gt.sentence_slope_sd);
  }
  const int R = gt.categories();
  for (std::size_t p = 0; p < plan.participants.size(); ++p) {
    const ParticipantPlan& pp = plan.participants[p];
    const RandomEffects we = draw_effects(options.seed, Stream::worker, static_cast<std::uint32_t>(p),
                                          gt.worker_intercept_sd, gt.worker_slope_sd);
    const bool clicker = options.clickers.count(pp.worker_id) > 0;
    auto rng = stream(options.seed, Stream::response, static_cast<std::uint32_t>(p));
    std::uniform_int_distribution<int> uniform_rating(1, R);
    std::lognormal_distribution<double> time(std::log(gt.completion_median_s), gt.completion_log_sd);
    for (std::size_t pos = 0; pos < pp.items.size(); ++pos) {
      const PlanItem& item = pp.items[pos];
      if (item.is_trap) {
        const int rating = clicker ? uniform_rating(rng) : item.expected_rating;
        (void)time(rng);
        result.traps.push_back({pp.worker_id, pos, rating, rating == item.expected_rating});
        continue;
      }
      const Sentence& sentence = plan.sentences[item.sentence_index];
      const double display_index = static_cast<double>(pos + 1);
      const auto contexts = extract(sentence, item.saliency, display_index, lexicons, item.condition);
      const TokenContext& x = contexts[item.target];
      const RandomEffects& se = sentence_effects.at(sentence.id);
      const double eta = gt.eta(x) + we.intercept + we.slope * x.saliency + se.intercept + se.slope * x.saliency;
      const int rating = clicker ? uniform_rating(rng) : sample_rating(eta, gt.cut_points, rng);
      RatingRecord r;
      r.worker_id = pp.worker_id;
      r.sentence_id = sentence.id;
      r.token_index = static_cast<int>(item.target);
      r.context = x;
      r.rating = rating;
      r.completion_time_s = time(rng);
      r.display_index = static_cast<int>(pos + 1);
      r.condition = item.condition;
      result.records.push_back(std::move(r));
    }
  }
  return result;
}

}  // namespace salperc
