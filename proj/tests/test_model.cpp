#include <gtest/gtest.h>

#include <random>

#include "salperc/model_io.hpp"
#include "support.hpp"

using namespace salperc;
using salperc::testing::simulate;
using salperc::testing::smooth_spec;

namespace {

GroundTruthModel saliency_only_truth() {
  GroundTruthModel gt;
  gt.functions = {{Covariate::saliency, Shape::linear, 6.0, {0.0, 1.0}, std::nullopt}};
  gt.worker_intercept_sd = 0.0;
  gt.worker_slope_sd = 0.0;
  gt.sentence_intercept_sd = 0.0;
  return gt;
}

const std::vector<RatingRecord>& small_records() {
  static const auto records = simulate(default_ground_truth(), 30, 10, 21).records;
  return records;
}

}  // namespace

TEST(OrdinalLikelihood, ProbabilitiesSumToOne) {
  const std::vector<double> cuts = {-1.0, 1.31, 3.29, 5.15, 7.1, 9.22};
  for (double eta : {-30.0, -2.0, 0.0, 4.0, 8.5, 40.0}) {
    const auto p = ordinal::category_probabilities(eta, cuts);
    ASSERT_EQ(p.size(), 7u);
    double sum = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (int r = 1; r <= 7; ++r) {
      if (p[r - 1] > 1e-300) EXPECT_NEAR(ordinal::rating_terms(r, eta, cuts).log_prob, std::log(p[r - 1]), 1e-9);
    }
  }
}

TEST(OrdinalLikelihood, CutParameterizationRoundTrips) {
  const std::vector<double> cuts = {-1.0, 1.31, 3.29, 5.15, 7.1, 9.22};
  const auto inc = ordinal::increments_from_cuts(cuts);
  ASSERT_EQ(inc.size(), 5u);
  const auto back = ordinal::cuts_from_increments(inc);
  for (std::size_t i = 0; i < cuts.size(); ++i) EXPECT_NEAR(back[i], cuts[i], 1e-12);
  EXPECT_THROW(ordinal::increments_from_cuts(std::vector<double>{0.0, 1.0}), Error);
}

TEST(OrdinalLikelihood, CategoryDerivativesMatchFiniteDifferences) {
  const double h = 1e-5;
  for (auto [a, b] : {std::pair{0.7, -0.4}, std::pair{3.0, 2.5}, std::pair{-1.0, -6.0}, std::pair{12.0, 11.9}}) {
    auto lp = [](double x, double y) { return ordinal::category_terms(x, y, true, true).log_prob; };
    const auto t = ordinal::category_terms(a, b, true, true);
    EXPECT_NEAR(t.da, (lp(a + h, b) - lp(a - h, b)) / (2 * h), 1e-6);
    EXPECT_NEAR(t.db, (lp(a, b + h) - lp(a, b - h)) / (2 * h), 1e-6);
    auto da = [](double x, double y) { return ordinal::category_terms(x, y, true, true).da; };
    auto db = [](double x, double y) { return ordinal::category_terms(x, y, true, true).db; };
    EXPECT_NEAR(t.daa, (da(a + h, b) - da(a - h, b)) / (2 * h), 1e-5);
    EXPECT_NEAR(t.dab, (da(a, b + h) - da(a, b - h)) / (2 * h), 1e-5);
    EXPECT_NEAR(t.dbb, (db(a, b + h) - db(a, b - h)) / (2 * h), 1e-5);
  }
}

TEST(Objective, HessianMatchesGradientDifferences) {
  const ModelSpec spec = smooth_spec({Covariate::saliency, Covariate::word_length}, 6, 2.0, true);
  const ModelDesign d = build_design(small_records(), spec);
  std::vector<double> lambdas(d.penalties.size(), 2.0);
  OrdinalObjective f(d.X, d.ratings, 7, combined_penalty(d, lambdas));
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 0.2);
  Eigen::VectorXd theta = initial_params(d);
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += normal(rng);
  const auto r = f.evaluate(theta, true, true);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    Eigen::VectorXd up = theta;
    Eigen::VectorXd down = theta;
    up(j) += h;
    down(j) -= h;
    const Eigen::VectorXd col = (f.evaluate(up).gradient - f.evaluate(down).gradient) / (2 * h);
    worst = std::max(worst, (col - r.hessian.col(j)).cwiseAbs().maxCoeff() / std::max(1.0, col.cwiseAbs().maxCoeff()));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Objective, ParameterCountIsChecked) {
  const ModelDesign d = build_design(small_records(), smooth_spec({Covariate::saliency}, 6, 1.0, false));
  std::vector<double> lambdas(d.penalties.size(), 1.0);
  try {
    (void)penalized_neg_loglik(Eigen::VectorXd::Zero(3), d, lambdas);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
  }
}

TEST(Fit, NewtonConvergesMonotonically) {
  const FittedPerceptionModel m = fit(small_records(), smooth_spec({Covariate::saliency, Covariate::word_length}, 8, 1.0, true));
  EXPECT_TRUE(m.report.converged);
  for (std::size_t i = 1; i < m.report.objective_trace.size(); ++i) {
    EXPECT_LE(m.report.objective_trace[i], m.report.objective_trace[i - 1] + 1e-9);
  }
  EXPECT_DOUBLE_EQ(m.cut_points.front(), -1.0);
  for (std::size_t i = 1; i < m.cut_points.size(); ++i) EXPECT_GT(m.cut_points[i], m.cut_points[i - 1]);
}

TEST(Fit, RecoversLinearEffect) {
  GroundTruthModel gt = saliency_only_truth();
  gt.functions[0].amplitude = 2.0;
  gt.intercept = 3.0;
  auto sim = simulate(gt, 150, 67, 8);
  sim.records.resize(10000);
  FitOptions fo;
  fo.seed = 3;
  const FittedPerceptionModel m = fit(sim.records, smooth_spec({Covariate::saliency}, 10, std::nullopt, false), fo);
  const auto grid = salperc::testing::linspace(0.0, 1.0, 50);
  const PartialEffect pe = m.partial_effect("s(saliency)", grid);
  EXPECT_GE(salperc::testing::correlation(pe.fit, grid), 0.98);
  EXPECT_NEAR(pe.fit.back() - pe.fit.front(), 2.0, 0.3);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_GE(pe.se[i], 0.0);
    EXPECT_NEAR(pe.upper[i] - pe.lower[i], 2 * pe.se[i], 1e-12);
  }
}

TEST(Fit, SmoothingSelectionIsDeterministic) {
  FitOptions fo;
  fo.seed = 9;
  fo.lambda_grid = {1e-1, 1e2, 1e5};
  const ModelSpec spec = smooth_spec({Covariate::saliency, Covariate::word_length}, 6, std::nullopt, false);
  const auto a = select_smoothing(small_records(), spec, fo);
  const auto b = select_smoothing(small_records(), spec, fo);
  EXPECT_EQ(a.term_lambdas, b.term_lambdas);
  EXPECT_GE(a.sweeps, 1);
  for (std::size_t i = 1; i < a.cv_deviance.size(); ++i) EXPECT_LT(a.cv_deviance[i], a.cv_deviance[i - 1]);
}

TEST(Fit, EdfShrinksWithLambda) {
  auto edf_of = [](double lambda) {
    const auto m = fit(small_records(), smooth_spec({Covariate::word_length}, 10, lambda, false));
    return m.edf().at(0).edf;
  };
  const double rough = edf_of(1e-4);
  const double smooth = edf_of(1e6);
  EXPECT_GT(rough, 7.0);
  EXPECT_LE(rough, 9.0 + 1e-9);
  EXPECT_LT(smooth, 0.5);
}

TEST(Fit, AveragedPredictionEqualsLiteralMean) {
  const FittedPerceptionModel m = fit(small_records(), smooth_spec({Covariate::saliency}, 6, 1.0, true));
  TokenContext x;
  for (double s : {0.0, 0.3, 0.9}) {
    double sum = 0.0;
    for (const auto& w : m.workers) {
      for (const auto& v : m.sentences) sum += m.predict_latent(s, x, GroupLevels{w, v});
    }
    EXPECT_NEAR(sum / static_cast<double>(m.workers.size() * m.sentences.size()), m.predict_latent_averaged(s, x), 1e-10);
  }
}

TEST(Fit, InputErrors) {
  EXPECT_THROW(fit(std::vector<RatingRecord>{}, smooth_spec({Covariate::saliency}, 6, 1.0, false)), Error);
  auto records = small_records();
  records[3].rating = 9;
  try {
    (void)fit(records, smooth_spec({Covariate::saliency}, 6, 1.0, false));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::validation);
  }
}

TEST(Fit, DefaultSpecWithInteractions) {
  DefaultSpecOptions o;
  o.k = 6;
  o.k_saliency = 8;
  o.interactions = true;
  o.lambda = 10.0;
  const ModelSpec spec = default_model_spec(o);
  auto records = small_records();
  for (auto& r : records) r.context.word_frequency = 0.25;
  const FittedPerceptionModel m = fit(records, spec);
  EXPECT_TRUE(m.coefficients.allFinite());
  EXPECT_NE(m.find_block("ti(saliency,word_length)"), nullptr);
  EXPECT_NE(m.find_block("re(worker,saliency)"), nullptr);
  // Covariates constant in the data are dropped with a note.
  ASSERT_FALSE(m.report.dropped.empty());
  EXPECT_NE(m.report.dropped.front().find("word_frequency"), std::string::npos);
  EXPECT_TRUE(std::isfinite(m.predict_latent_averaged(0.4, TokenContext{})));
}

TEST(Model, UnknownTermListsAvailableTerms) {
  const FittedPerceptionModel m = fit(small_records(), smooth_spec({Covariate::saliency}, 6, 1.0, false));
  try {
    (void)m.partial_effect("s(word_length)", std::vector<double>{1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
    EXPECT_NE(std::string(e.what()).find("s(saliency)"), std::string::npos);
  }
}

TEST(Model, JsonRoundTripPreservesPredictions) {
  DefaultSpecOptions o;
  o.k = 6;
  o.k_saliency = 8;
  o.lambda = 3.0;
  ModelSpec spec = default_model_spec(o);
  spec.terms.emplace_back(TensorTerm{Covariate::saliency, Covariate::word_length, 5, 5, std::array<double, 2>{1.0, 2.0}});
  const FittedPerceptionModel m = fit(small_records(), spec);
  const auto dir = salperc::testing::temp_dir("model-io");
  save_model(m, (dir / "m.json").string());
  const FittedPerceptionModel back = load_model((dir / "m.json").string());
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    TokenContext x;
    x.word_length = 1 + 15 * u(rng);
    x.word_frequency = u(rng);
    x.display_index = 1 + 40 * u(rng);
    x.capitalization = i % 2 ? Capitalization::first_capital : Capitalization::lower;
    const GroupLevels g{m.workers[static_cast<std::size_t>(i) % m.workers.size()], m.sentences[0]};
    const double sal = u(rng);
    EXPECT_EQ(back.predict_latent(sal, x, g), m.predict_latent(sal, x, g));
    EXPECT_EQ(back.predict_latent_averaged(sal, x), m.predict_latent_averaged(sal, x));
  }
  EXPECT_EQ(back.cut_points, m.cut_points);
  EXPECT_EQ(to_json(back).dump(), to_json(m).dump());
  std::filesystem::remove_all(dir);
}

TEST(Model, LoadRejectsForeignDocuments) {
  const auto dir = salperc::testing::temp_dir("model-bad");
  std::ofstream((dir / "x.json").string()) << R"({"format":"something-else","version":1})";
  try {
    (void)load_model((dir / "x.json").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::input);
  }
  EXPECT_THROW((void)load_model((dir / "missing.json").string()), Error);
  std::filesystem::remove_all(dir);
}
