#pragma once

#include <chrono>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "salperc/model_spec.hpp"
#include "salperc/ordinal_gam.hpp"
#include "salperc/records.hpp"
#include "salperc/simulator.hpp"

namespace salperc::testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("salperc-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  [[nodiscard]] double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

/// Simulated ratings for `participants` workers over a synthetic corpus.
inline SimulationResult simulate(const GroundTruthModel& gt, std::size_t sentences, std::size_t participants,
                                 std::uint64_t seed, PlanMode mode = PlanMode::single_condition,
                                 StudyPlan* plan_out = nullptr) {
  const SyntheticCorpus corpus = make_synthetic_corpus(sentences, seed);
  PlanOptions po;
  po.participants = participants;
  po.mode = mode;
  po.seed = seed;
  StudyPlan plan = make_study_plan(corpus.sentences, po);
  SimulationOptions so;
  so.seed = seed;
  auto result = simulate_ratings(gt, plan, corpus.lexicons, so);
  if (plan_out) *plan_out = std::move(plan);
  return result;
}

inline ModelSpec smooth_spec(std::initializer_list<Covariate> covariates, int k, std::optional<double> lambda,
                             bool random_effects) {
  ModelSpec spec;
  for (Covariate c : covariates) spec.terms.emplace_back(smooth(c, k, lambda));
  if (random_effects) {
    spec.terms.emplace_back(RandomInterceptTerm{Grouping::worker, lambda});
    spec.terms.emplace_back(RandomSlopeTerm{Grouping::worker, Covariate::saliency, lambda});
    spec.terms.emplace_back(RandomInterceptTerm{Grouping::sentence, lambda});
  }
  return spec;
}

inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = a + (b - a) * i / (n - 1);
  return out;
}

inline std::size_t count_substr(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

}  // namespace salperc::testing
