#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "salperc/study_service.hpp"
#include "support.hpp"

#include <httplib.h>

using namespace salperc;

namespace {

StudyPlan small_plan(std::size_t sentences, std::size_t participants, PlanMode mode = PlanMode::single_condition,
                     std::uint64_t seed = 5, const std::string& study = "pilot") {
  const SyntheticCorpus corpus = make_synthetic_corpus(sentences, seed);
  PlanOptions po;
  po.study_id = study;
  po.participants = participants;
  po.mode = mode;
  po.seed = seed;
  return make_study_plan(corpus.sentences, po);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Simulator

TEST(Simulator, StreamsAreDeterministicAndIndependent) {
  const SyntheticCorpus c = make_synthetic_corpus(3, 1);
  const SaliencyMap a = random_saliencies(c.sentences[0], 42, 0);
  EXPECT_EQ(a.scores, random_saliencies(c.sentences[0], 42, 0).scores);
  EXPECT_NE(a.scores, random_saliencies(c.sentences[0], 42, 1).scores);
  EXPECT_NE(a.scores, random_saliencies(c.sentences[0], 43, 0).scores);
  for (double s : a.scores) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Simulator, LatentShapes) {
  LatentFunction f{Covariate::word_length, Shape::parabola, 2.0, {1.0, 3.0}, std::nullopt};
  EXPECT_DOUBLE_EQ(f(1.0), 2.0);
  EXPECT_DOUBLE_EQ(f(2.0), 0.0);
  EXPECT_DOUBLE_EQ(f(10.0), 2.0);  // clamped to the domain
  f.shape = Shape::sine;
  EXPECT_NEAR(f(2.0), 2.0, 1e-12);
  f.shape = Shape::square;
  EXPECT_DOUBLE_EQ(f(2.0), 0.5);
  f.shape = Shape::linear;
  EXPECT_DOUBLE_EQ(f(3.0), 2.0);
}

TEST(Simulator, GroundTruthJsonAndValidation) {
  GroundTruthModel gt = default_ground_truth();
  gt.factors.push_back(FactorEffect{Covariate::capitalization, {{"first_capital", 0.4}}});
  gt.functions.back().only_condition = Condition::bars;
  const GroundTruthModel back = ground_truth_from_json(to_json(gt));
  EXPECT_EQ(to_json(back), to_json(gt));
  TokenContext x;
  x.capitalization = Capitalization::first_capital;
  EXPECT_DOUBLE_EQ(back.eta(x), gt.eta(x));

  auto j = to_json(gt);
  j["cut_points"] = {0.0, -1.0};
  EXPECT_THROW(ground_truth_from_json(j), Error);
}

TEST(Simulator, RatingFrequenciesMatchCategoryProbabilities) {
  const std::vector<double> cuts = {-1.0, 1.31, 3.29, 5.15, 7.1, 9.22};
  std::mt19937_64 rng(8);
  for (double eta : {0.5, 4.0, 8.0}) {
    std::vector<double> counts(7, 0.0);
    const int n = 200000;
    for (int i = 0; i < n; ++i) counts[sample_rating(eta, cuts, rng) - 1] += 1.0;
    const auto p = ordinal::category_probabilities(eta, cuts);
    for (int r = 0; r < 7; ++r) EXPECT_NEAR(counts[r] / n, p[r], 4.0 * std::sqrt(p[r] * (1 - p[r]) / n) + 1e-4);
  }
}

TEST(Simulator, PlanStructure) {
  const StudyPlan plan = small_plan(30, 7, PlanMode::within_subject);
  EXPECT_EQ(check_plan(plan), "");
  for (std::size_t p = 0; p < plan.participants.size(); ++p) {
    const ParticipantPlan& pp = plan.participants[p];
    EXPECT_EQ(pp.worker_id, worker_id_for(p));
    EXPECT_EQ(pp.ordering, p % 6);
    EXPECT_EQ(pp.condition_order, condition_orderings()[p % 6]);
    ASSERT_EQ(pp.items.size(), 33u);
    for (std::size_t t : pp.trap_positions) {
      EXPECT_TRUE(pp.items[t].is_trap);
      std::size_t before = 0;
      for (std::size_t i = 0; i < t; ++i) before += pp.items[i].is_trap ? 0 : 1;
      EXPECT_GE(before, trap_min_preceding(30));
    }
    // Thirds of the real items follow the participant's condition order.
    std::size_t real = 0;
    for (const auto& item : pp.items) {
      if (item.is_trap) continue;
      EXPECT_EQ(item.condition, pp.condition_order[real / 10]);
      ++real;
    }
  }
  EXPECT_EQ(to_json(study_plan_from_json(to_json(plan))), to_json(plan));
}

TEST(Simulator, CorrectedConditionUsesTheCorrector) {
  const SyntheticCorpus corpus = make_synthetic_corpus(9, 2);
  PlanOptions po;
  po.mode = PlanMode::within_subject;
  po.participants = 1;
  po.corrector = [](const Sentence&, const SaliencyMap& m, double) {
    SaliencyMap out = m;
    for (double& s : out.scores) s = 1.0 - s;
    return out;
  };
  const StudyPlan plan = make_study_plan(corpus.sentences, po);
  std::size_t corrected = 0;
  for (const auto& item : plan.participants[0].items) {
    if (item.is_trap) continue;
    if (item.condition == Condition::corrected) {
      ++corrected;
      for (std::size_t i = 0; i < item.saliency.scores.size(); ++i) {
        EXPECT_DOUBLE_EQ(item.displayed.scores[i], 1.0 - item.saliency.scores[i]);
      }
    } else {
      EXPECT_EQ(item.displayed.scores, item.saliency.scores);
    }
  }
  EXPECT_EQ(corrected, 3u);

  int warnings = 0;
  Warnings::set_handler([&](std::string_view) { ++warnings; });
  po.corrector = nullptr;
  po.mode = PlanMode::single_condition;
  po.condition = Condition::corrected;
  const StudyPlan fallback = make_study_plan(corpus.sentences, po);
  Warnings::set_handler(nullptr);
  EXPECT_GE(warnings, 1);
  for (const auto& item : fallback.participants[0].items) EXPECT_EQ(item.displayed.scores, item.saliency.scores);
}

TEST(Simulator, RatingsAndTraps) {
  const StudyPlan plan = small_plan(12, 4);
  const SyntheticCorpus corpus = make_synthetic_corpus(12, 5);
  SimulationOptions so;
  so.seed = 3;
  so.clickers = {"w0004"};
  const SimulationResult sim = simulate_ratings(default_ground_truth(), plan, corpus.lexicons, so);
  ASSERT_EQ(sim.records.size(), 48u);
  EXPECT_EQ(sim.traps.size(), 12u);
  for (const auto& t : sim.traps) {
    if (t.worker_id != "w0004") EXPECT_TRUE(t.passed);
  }
  const auto failed = sim.trap_failed_workers();
  for (const auto& w : failed) EXPECT_EQ(w, "w0004");
  // Display index counts every shown item, traps included.
  const ParticipantPlan& pp = plan.participants[0];
  std::size_t r = 0;
  for (std::size_t pos = 0; pos < pp.items.size(); ++pos) {
    if (pp.items[pos].is_trap) continue;
    EXPECT_EQ(sim.records[r].display_index, static_cast<int>(pos + 1));
    EXPECT_DOUBLE_EQ(sim.records[r].context.display_index, static_cast<double>(pos + 1));
    EXPECT_EQ(sim.records[r].sentence_id, pp.items[pos].sentence_id);
    EXPECT_EQ(sim.records[r].token_index, static_cast<int>(pp.items[pos].target));
    ++r;
  }
  const SimulationResult again = simulate_ratings(default_ground_truth(), plan, corpus.lexicons, so);
  EXPECT_EQ(to_jsonl(apply_filters(again.records, {}, {})), to_jsonl(apply_filters(sim.records, {}, {})));
}

// ---------------------------------------------------------------------------
// Records

TEST(Records, CsvAndJsonlRoundTrip) {
  auto sim = salperc::testing::simulate(default_ground_truth(), 5, 2, 4);
  sim.records[0].comment = "odd, \"quoted\"\nmulti-line";
  sim.records[1].context.dependency_relation = "nsubj";
  sim.records[2].context.capitalization = Capitalization::all_capital;
  const auto rows = apply_filters(sim.records, {"w0002"}, ExportFilters{});
  std::istringstream csv(to_csv(rows));
  const auto from_csv = records_from_csv(csv);
  std::istringstream jsonl(to_jsonl(rows));
  const auto from_jsonl = records_from_jsonl(jsonl);
  ASSERT_EQ(from_csv.size(), sim.records.size());
  ASSERT_EQ(from_jsonl.size(), sim.records.size());
  for (std::size_t i = 0; i < sim.records.size(); ++i) {
    EXPECT_EQ(to_json(from_csv[i]), to_json(sim.records[i])) << i;
    EXPECT_EQ(to_json(from_jsonl[i]), to_json(sim.records[i])) << i;
  }
  EXPECT_NE(to_csv(rows).find(kTrapFail), std::string::npos);
}

TEST(Records, MalformedInputIsReported) {
  std::istringstream missing("worker_id,rating\nw1,3\n");
  EXPECT_THROW(records_from_csv(missing), Error);
  std::istringstream bad_json("{\"worker_id\": 3}\n");
  EXPECT_THROW(records_from_jsonl(bad_json), Error);
}

TEST(Records, FiltersFlagAtThresholds) {
  RatingRecord r;
  r.context.word_length = 20;
  r.completion_time_s = 59.99;
  auto rows = apply_filters({r}, {}, ExportFilters{});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].flags, std::vector<std::string>{kLengthOutlier});
  r.context.word_length = 19;
  r.completion_time_s = 60.0;
  rows = apply_filters({r}, {}, ExportFilters{});
  EXPECT_EQ(rows[0].flags, std::vector<std::string>{kTimeOutlier});
  ExportFilters drop;
  drop.paper_filters = true;
  EXPECT_TRUE(apply_filters({r}, {}, drop).empty());
  r.completion_time_s = 3.0;
  EXPECT_TRUE(apply_filters({r}, {r.worker_id}, drop).empty());
  EXPECT_EQ(apply_filters({r}, {}, drop).size(), 1u);
}

// ---------------------------------------------------------------------------
// Durable log

TEST(DurableLog, TornFinalLineIsDropped) {
  const auto dir = salperc::testing::temp_dir("log");
  const std::string path = (dir / "log.jsonl").string();
  std::ofstream(path) << "{\"a\":1}\n{\"b\":";
  int warnings = 0;
  Warnings::set_handler([&](std::string_view) { ++warnings; });
  {
    service::DurableLog log(path);
    EXPECT_EQ(log.lines().size(), 1u);
    log.append({{"c", 3}});
  }
  Warnings::set_handler(nullptr);
  EXPECT_EQ(warnings, 1);
  EXPECT_EQ(slurp(path), "{\"a\":1}\n{\"c\":3}\n");
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Study service

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = salperc::testing::temp_dir("service");
    log_ = (dir_ / "log.jsonl").string();
    plan_ = small_plan(6, 2, PlanMode::within_subject);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  static ErrorCode code_of(const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    ADD_FAILURE() << "no error";
    return ErrorCode::io;
  }

  std::filesystem::path dir_;
  std::string log_;
  StudyPlan plan_;
};

TEST_F(ServiceTest, SessionLifecycle) {
  service::StudyService svc({plan_}, log_);
  const auto s = svc.create_session("pilot", "alice");
  EXPECT_EQ(s.at("session_id"), "pilot-s0001");
  EXPECT_EQ(s.at("progress").at("total"), 9);
  EXPECT_EQ(code_of([&] { svc.create_session("pilot", "alice"); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { svc.create_session("nope", "bob"); }), ErrorCode::not_found);
  svc.create_session("pilot", "bob");
  EXPECT_EQ(code_of([&] { svc.create_session("pilot", "carol"); }), ErrorCode::exhausted);

  const std::string sid = s.at("session_id");
  const auto first = svc.next_item(sid);
  EXPECT_EQ(first, svc.next_item(sid));
  EXPECT_FALSE(first.at("end_of_study").get<bool>());
  const auto& item = first.at("item");
  EXPECT_EQ(item.at("tokens").at(item.at("target_index").get<std::size_t>()), item.at("target_word"));
  EXPECT_NE(item.at("markup").get<std::string>().find("<svg"), std::string::npos);

  EXPECT_EQ(code_of([&] { svc.submit(sid, service::Submission{0, 2.0, {}, {}}); }), ErrorCode::validation);
  EXPECT_EQ(code_of([&] { svc.submit(sid, service::Submission{3, -1.0, {}, {}}); }), ErrorCode::validation);
  EXPECT_EQ(code_of([&] { svc.submit(sid, service::Submission{3, 2.0, {}, std::size_t{4}}); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { svc.submit("pilot-s0099", service::Submission{3, 2.0, {}, {}}); }), ErrorCode::not_found);

  const auto& items = plan_.participants[0].items;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const int rating = items[i].is_trap ? items[i].expected_rating : 5;
    const auto ack = svc.submit(sid, service::Submission{rating, 4.0, std::string("fine"), i});
    EXPECT_EQ(ack.at("stored_cursor"), i);
  }
  EXPECT_TRUE(svc.next_item(sid).at("end_of_study").get<bool>());
  EXPECT_EQ(svc.session_info(sid).at("status"), "complete");
  EXPECT_EQ(code_of([&] { svc.submit(sid, service::Submission{3, 2.0, {}, {}}); }), ErrorCode::conflict);

  const auto rows = svc.export_records("pilot", ExportFilters{});
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].record.worker_id, "alice");
  EXPECT_EQ(rows[0].record.comment.value(), "fine");
  EXPECT_EQ(code_of([&] { (void)svc.export_text("pilot", "xml", ExportFilters{}); }), ErrorCode::validation);
}

TEST_F(ServiceTest, RestartReplaysTheLog) {
  std::string sid;
  {
    service::StudyService svc({plan_}, log_);
    sid = svc.create_session("pilot", "alice").at("session_id");
    svc.submit(sid, service::Submission{4, 2.0, {}, {}});
    svc.submit(sid, service::Submission{2, 2.0, {}, {}});
  }
  service::StudyService svc({plan_}, log_);
  EXPECT_EQ(svc.session_info(sid).at("cursor"), 2);
  EXPECT_EQ(code_of([&] { svc.create_session("pilot", "alice"); }), ErrorCode::conflict);
  EXPECT_EQ(svc.create_session("pilot", "bob").at("session_id"), "pilot-s0002");
  EXPECT_EQ(svc.export_records("pilot", ExportFilters{}).size(), 2u);
}

TEST_F(ServiceTest, TrapFailuresAreFlagged) {
  service::StudyService svc({plan_}, log_);
  const std::string sid = svc.create_session("pilot", "mallory").at("session_id");
  for (const auto& item : plan_.participants[0].items) {
    const int rating = item.is_trap ? (item.expected_rating == 7 ? 1 : 7) : 3;
    svc.submit(sid, service::Submission{rating, 2.0, {}, {}});
  }
  for (const auto& row : svc.export_records("pilot", ExportFilters{})) {
    EXPECT_NE(std::find(row.flags.begin(), row.flags.end(), kTrapFail), row.flags.end());
  }
  ExportFilters drop;
  drop.paper_filters = true;
  EXPECT_TRUE(svc.export_records("pilot", drop).empty());
}

TEST_F(ServiceTest, RejectsInvalidPlans) {
  StudyPlan bad = plan_;
  bad.participants[0].items.pop_back();
  EXPECT_EQ(code_of([&] { service::StudyService svc({bad}, log_); }), ErrorCode::config);
  EXPECT_EQ(code_of([&] { service::StudyService svc({plan_, plan_}, log_); }), ErrorCode::config);
}

TEST(Submission, Parsing) {
  const auto s = service::submission_from_json(nlohmann::json::parse(R"({"rating":3,"completion_time_ms":2500})"));
  EXPECT_EQ(s.rating, 3);
  EXPECT_DOUBLE_EQ(s.completion_time_s, 2.5);
  EXPECT_THROW(service::submission_from_json(nlohmann::json::parse(R"({"rating":"3","completion_time_s":1})")), Error);
  EXPECT_THROW(service::submission_from_json(nlohmann::json::parse(R"({"rating":3})")), Error);
  EXPECT_THROW(service::submission_from_json(nlohmann::json::parse(R"({"rating":3,"completion_time_s":1,"cursor":-2})")),
               Error);
}

TEST_F(ServiceTest, HttpApi) {
  service::StudyService svc({plan_}, log_);
  service::HttpStudyServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread t([&] { server.serve(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 200 && !server.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));

  auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  auto bad = client.Post("/studies/pilot/sessions", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(nlohmann::json::parse(bad->body).at("error").at("code"), "validation");

  auto created = client.Post("/studies/pilot/sessions", R"({"worker_id":"http-1"})", "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 200);
  const std::string sid = nlohmann::json::parse(created->body).at("session_id");
  auto dup = client.Post("/studies/pilot/sessions", R"({"worker_id":"http-1"})", "application/json");
  EXPECT_EQ(dup->status, 409);
  auto missing = client.Get("/sessions/none");
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(nlohmann::json::parse(missing->body).at("error").at("code"), "not_found");

  auto next = client.Get("/sessions/" + sid + "/next");
  ASSERT_EQ(next->status, 200);
  EXPECT_EQ(nlohmann::json::parse(next->body).at("item").at("mode"), "heatmap");
  auto out_of_range = client.Post("/sessions/" + sid + "/ratings", R"({"rating":8,"completion_time_s":1})", "application/json");
  EXPECT_EQ(out_of_range->status, 400);
  auto ok = client.Post("/sessions/" + sid + "/ratings", R"({"rating":6,"completion_time_s":1.5,"cursor":0})", "application/json");
  ASSERT_EQ(ok->status, 200);
  auto replay = client.Post("/sessions/" + sid + "/ratings", R"({"rating":6,"completion_time_s":1.5,"cursor":0})", "application/json");
  EXPECT_EQ(replay->status, 409);

  auto csv = client.Get("/studies/pilot/export?format=csv");
  ASSERT_EQ(csv->status, 200);
  std::istringstream in(csv->body);
  EXPECT_EQ(records_from_csv(in).size(), 1u);
  auto jsonl = client.Get("/studies/pilot/export?format=jsonl&paper-filters=true");
  EXPECT_EQ(jsonl->status, 200);
  auto bad_format = client.Get("/studies/pilot/export?format=xml");
  EXPECT_EQ(bad_format->status, 400);

  server.stop();
  t.join();
}
