// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "salperc/bias_correction.hpp"
#include "salperc/study_service.hpp"
#include "salperc/visualization.hpp"
#include "support.hpp"

#include <httplib.h>

extern char** environ;

namespace {

using namespace salperc;
using salperc::testing::Stopwatch;

struct Failure {
  std::string message;
};

void expect(bool ok, const std::string& message) {
  if (!ok) throw Failure{message};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

std::string gradient_correctness() {
  Stopwatch sw;
  const auto sim = salperc::testing::simulate(default_ground_truth(), 30, 8, 11);
  ModelSpec spec = default_model_spec(DefaultSpecOptions{8, 10, 5, false, true, 1.0});
  spec.terms.emplace_back(TensorTerm{Covariate::saliency, Covariate::word_length, 5, 5, std::array<double, 2>{1.0, 1.0}});
  const ModelDesign d = build_design(sim.records, spec);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 0.3);
  // Larger lambdas push the objective toward 1e6, where rounding in a
  // central difference at h=1e-5 alone is ~eps*f/h > 1e-5.
  std::uniform_real_distribution<double> log_lambda(-2.0, 0.0);
  const Eigen::VectorXd base = initial_params(d);
  double worst = 0.0;
  for (int point = 0; point < 50; ++point) {
    Eigen::VectorXd theta = base;
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += normal(rng);
    std::vector<double> lambdas(d.penalties.size());
    for (double& l : lambdas) l = std::pow(10.0, log_lambda(rng));
    const Eigen::VectorXd g = penalized_neg_loglik(theta, d, lambdas).gradient;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      const double h = 1e-5 * std::max(1.0, std::abs(theta(i)));
      Eigen::VectorXd up = theta;
      Eigen::VectorXd down = theta;
      up(i) += h;
      down(i) -= h;
      const double fd =
          (penalized_neg_loglik(up, d, lambdas).value - penalized_neg_loglik(down, d, lambdas).value) / (2.0 * h);
      worst = std::max(worst, std::abs(g(i) - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  expect(worst < 1e-5, "max relative error " + fmt(worst));
  expect(sw.seconds() < 30.0, "took " + fmt(sw.seconds()) + " s");
  return "max relative error " + fmt(worst) + ", " + std::to_string(d.num_params()) + " parameters";
}

std::string oracle_recovery() {
  Stopwatch sw;
  const GroundTruthModel gt = default_ground_truth();
  auto sim = salperc::testing::simulate(gt, 150, 67, 2024);
  sim.records.resize(10000);
  const ModelSpec spec = salperc::testing::smooth_spec(
      {Covariate::saliency, Covariate::word_length, Covariate::display_index}, 10, std::nullopt, true);
  FitOptions fo;
  fo.seed = 7;
  const FittedPerceptionModel m = fit(sim.records, spec, fo);
  std::string detail;
  for (const auto& f : gt.functions) {
    const ModelBlock* b = m.find_block("s(" + std::string(to_string(f.covariate)) + ")");
    expect(b != nullptr, "missing term for " + std::string(to_string(f.covariate)));
    const Interval r = m.training_ranges.at(f.covariate);
    const auto grid = salperc::testing::linspace(r.lower, r.upper, 50);
    const PartialEffect pe = m.partial_effect(b->label, grid);
    std::vector<double> truth;
    for (double v : grid) truth.push_back(f(v));
    const double c = salperc::testing::correlation(pe.fit, truth);
    detail += b->label + " r=" + fmt(c) + " ";
    expect(c >= 0.95, b->label + " correlates " + fmt(c) + " with the truth");
  }
  double worst = 0.0;
  for (std::size_t j = 0; j < gt.cut_points.size(); ++j) {
    worst = std::max(worst, std::abs(m.cut_points[j] - gt.cut_points[j]));
  }
  expect(worst <= 0.25, "cut point off by " + fmt(worst));
  expect(sw.seconds() < 600.0, "took " + fmt(sw.seconds()) + " s");
  return detail + "max cut error " + fmt(worst) + ", " + fmt(sw.seconds()) + " s";
}

std::string averaging_equivalence() {
  GroundTruthModel gt = default_ground_truth();
  gt.sentence_slope_sd = 0.2;
  const auto sim = salperc::testing::simulate(gt, 150, 50, 99);
  ModelSpec spec = salperc::testing::smooth_spec({Covariate::saliency, Covariate::word_length}, 8, 1.0, true);
  spec.terms.emplace_back(RandomSlopeTerm{Grouping::sentence, Covariate::saliency, 1.0});
  const FittedPerceptionModel m = fit(sim.records, spec);
  expect(m.workers.size() == 50, std::to_string(m.workers.size()) + " workers");
  expect(m.sentences.size() == 150, std::to_string(m.sentences.size()) + " sentences");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    TokenContext x;
    x.word_length = 1.0 + 18.0 * unit(rng);
    const double s = unit(rng);
    double sum = 0.0;
    for (const auto& w : m.workers) {
      for (const auto& v : m.sentences) sum += m.predict_latent(s, x, GroupLevels{w, v});
    }
    const double literal = sum / static_cast<double>(m.workers.size() * m.sentences.size());
    worst = std::max(worst, std::abs(literal - m.predict_latent_averaged(s, x)));
  }
  expect(worst <= 1e-10, "max difference " + fmt(worst));
  return "max difference " + fmt(worst);
}

struct OffsetStub {
  std::vector<double> offsets;  // per word position
  std::function<double(double)> g;
  double operator()(double s, const TokenContext& x) const {
    const auto i = static_cast<std::size_t>(x.word_position);
    return g(s) + (i >= 1 && i <= offsets.size() ? offsets[i - 1] : 0.0);
  }
};

std::string correction_efficacy() {
  Stopwatch sw;
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> offset(-0.8, 0.8);
  std::uniform_real_distribution<double> score(0.25, 0.75);
  std::uniform_int_distribution<int> len(5, 25);
  const std::vector<std::function<double(double)>> shapes = {[](double s) { return 4.0 * s; },
                                                             [](double s) { return 6.0 / (1.0 + std::exp(-6.0 * (s - 0.5))); }};
  double min_removed = 100.0;
  for (int sentence = 0; sentence < 20; ++sentence) {
    Sentence sent;
    sent.id = "stub-" + std::to_string(sentence);
    SaliencyMap map{sent.id, {}};
    OffsetStub stub;
    stub.g = shapes[sentence % 2];
    for (int i = 0, n = len(rng); i < n; ++i) {
      sent.tokens.push_back(Token{"w" + std::to_string(i), std::nullopt, std::nullopt, std::nullopt});
      map.scores.push_back(score(rng));
      stub.offsets.push_back(offset(rng));
    }
    TokenContext x_ref;
    x_ref.word_position = 0.0;  // offset 0
    bool in_range = true;
    CorrectionOptions co;
    co.on_update = [&](int, std::size_t, double v) { in_range = in_range && v >= 0.0 && v <= 1.0; };
    const CorrectionResult r = correct_sentence(stub, sent, map, x_ref, Lexicons{}, co);
    expect(in_range, sent.id + ": an update left [0, 1]");
    min_removed = std::min(min_removed, r.removed_percent);
    expect(r.removed_percent >= 90.0, sent.id + ": removed " + fmt(r.removed_percent) + "%");
  }
  expect(sw.seconds() < 60.0, "took " + fmt(sw.seconds()) + " s");
  return "minimum removed " + fmt(min_removed) + "%, " + fmt(sw.seconds()) + " s";
}

FittedPerceptionModel word_length_model() {
  GroundTruthModel gt = default_ground_truth();
  gt.functions = {{Covariate::saliency, Shape::square, 5.0, {0.0, 1.0}, std::nullopt},
                  {Covariate::word_length, Shape::linear, 3.0, {1.0, 19.0}, std::nullopt}};
  const auto sim = salperc::testing::simulate(gt, 120, 40, 314);
  const ModelSpec spec = salperc::testing::smooth_spec({Covariate::saliency, Covariate::word_length}, 8, std::nullopt, true);
  FitOptions fo;
  fo.seed = 1;
  return fit(sim.records, spec, fo);
}

std::string correction_sign_pattern(const FittedPerceptionModel& m) {
  const ReferenceContext ref = select_reference_context(m, ReferenceOptions{10001, 0.5, 8});
  const auto u = averaged_perception(m);
  Sentence sent;
  sent.id = "lengths";
  const std::vector<std::string> words = {"a", "extraordinarily", "to", "misunderstandings", "I", "of",
                                          "incomprehensible", "an"};
  const std::vector<double> scores = {0.3, 0.8, 0.5, 0.9, 0.2, 0.6, 0.7, 0.4};
  for (const auto& w : words) sent.tokens.push_back(Token{w, std::nullopt, std::nullopt, std::nullopt});
  const SaliencyMap map{sent.id, scores};
  const CorrectionResult r = correct_sentence(u, sent, map, ref.context, Lexicons{});
  std::string detail = "reference word length " + fmt(ref.context.word_length) + ";";
  for (std::size_t i = 0; i < words.size(); ++i) {
    const double len = static_cast<double>(words[i].size());
    const double delta = r.corrected.scores[i] - scores[i];
    detail += " " + words[i] + " " + (delta > 0 ? "+" : "") + fmt(delta);
    if (len >= 15) expect(delta < 0.0, words[i] + " (long, high saliency) moved by " + fmt(delta));
    if (len <= 2) expect(delta > 0.0, words[i] + " (short) moved by " + fmt(delta));
  }
  expect(ref.context.word_length > 2 && ref.context.word_length < 15,
         "reference word length " + fmt(ref.context.word_length) + " does not separate the groups");
  return detail;
}

std::string color_exactness() {
  const RgbColor half = saliency_to_rgb(0.5);
  const RgbColor quarter = saliency_to_rgb(0.25);
  expect(half.r == 255 && half.g == 127 && half.b == 127, "0.5 -> " + half.css());
  expect(quarter.r == 255 && quarter.g == 191 && quarter.b == 191, "0.25 -> " + quarter.css());
  int previous = 256;
  for (int q = 0; q <= 255; ++q) {
    const RgbColor c = saliency_to_rgb(q / 255.0);
    expect(c.r == 255 && c.g == c.b, "level " + std::to_string(q) + " is not a shade of red");
    expect(c.g < previous, "level " + std::to_string(q) + " is not strictly darker");
    previous = c.g;
  }
  return "0.5 -> " + half.css() + ", 0.25 -> " + quarter.css();
}

std::string reference_determinism(const FittedPerceptionModel& m) {
  std::set<std::string> seen;
  for (int run = 0; run < 5; ++run) {
    seen.insert(to_json(select_reference_context(m, ReferenceOptions{10001, 0.5, 2718})).dump());
  }
  expect(seen.size() == 1, std::to_string(seen.size()) + " distinct contexts over 5 runs");

  // n = 3 with u increasing in word length alone: the middle candidate wins.
  auto u = [](double, const TokenContext& x) { return 0.7 * x.word_length; };
  CovariateSpace space;
  space.ranges[Covariate::word_length] = Interval{1.0, 20.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto candidates = sample_contexts(space, 3, seed, 0.5);
    std::vector<std::size_t> order = {0, 1, 2};
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return candidates[a].word_length < candidates[b].word_length; });
    const ReferenceContext ref = select_reference_context(u, space, ReferenceOptions{3, 0.5, seed});
    expect(ref.candidate_index == order[1], "seed " + std::to_string(seed) + ": picked candidate " +
                                                std::to_string(ref.candidate_index) + ", expected " +
                                                std::to_string(order[1]));
  }
  return "5 identical runs at n=10001; n=3 picks the middle candidate for 20 seeds";
}

std::string protocol_invariants() {
  const SyntheticCorpus corpus = make_synthetic_corpus(150, 77);
  std::mt19937_64 rng(1234);
  std::uniform_int_distribution<std::size_t> n_sentences(3, 150);
  std::uniform_int_distribution<std::size_t> n_participants(1, 8);
  auto check_participant = [](const ParticipantPlan& pp, std::size_t n, PlanMode mode, const std::string& where) {
    std::size_t traps = 0;
    std::size_t real = 0;
    std::vector<std::size_t> seen;
    std::map<Condition, std::size_t> per_condition;
    for (const auto& item : pp.items) {
      if (item.is_trap) {
        ++traps;
        expect(real >= (n + 2) / 3, where + ": trap after only " + std::to_string(real) + " sentences");
      } else {
        ++real;
        seen.push_back(item.sentence_index);
        ++per_condition[item.condition];
      }
    }
    expect(traps == kTrapCount, where + ": " + std::to_string(traps) + " traps");
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < n; ++i) expect(i < seen.size() && seen[i] == i, where + ": not a permutation");
    expect(seen.size() == n, where + ": not a permutation");
    if (mode == PlanMode::within_subject) {
      for (Condition c : {Condition::saliency, Condition::corrected, Condition::bars}) {
        expect(per_condition[c] == n / 3, where + ": " + std::to_string(per_condition[c]) + " items in " +
                                              std::string(to_string(c)));
      }
    }
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const PlanMode mode = trial % 2 == 0 ? PlanMode::within_subject : PlanMode::single_condition;
    std::size_t n = trial % 4 == 0 ? 150 : n_sentences(rng);
    if (mode == PlanMode::within_subject) n -= n % 3;
    const std::vector<Sentence> sentences(corpus.sentences.begin(), corpus.sentences.begin() + static_cast<std::ptrdiff_t>(n));
    PlanOptions po;
    po.participants = n_participants(rng);
    po.mode = mode;
    po.seed = rng();
    const StudyPlan plan = make_study_plan(sentences, po);
    const std::string problem = check_plan(plan);
    expect(problem.empty(), "plan " + std::to_string(trial) + ": " + problem);
    for (const auto& pp : plan.participants) check_participant(pp, n, po.mode, "plan " + std::to_string(trial));
  }
  PlanOptions po;
  po.participants = 60;
  po.mode = PlanMode::within_subject;
  po.seed = 60;
  const StudyPlan plan = make_study_plan(corpus.sentences, po);
  std::map<std::size_t, int> orderings;
  for (const auto& pp : plan.participants) {
    check_participant(pp, 150, po.mode, pp.worker_id);
    ++orderings[pp.ordering];
  }
  expect(orderings.size() == 6, std::to_string(orderings.size()) + " orderings used");
  for (const auto& [o, count] : orderings) expect(count == 10, "ordering " + std::to_string(o) + " used " + std::to_string(count) + " times");
  return "1000 plans valid; 60 participants cover each of 6 orderings 10 times";
}

std::string export_filter_fidelity() {
  RatingRecord base;
  base.worker_id = "w1";
  base.sentence_id = "s1";
  std::vector<RatingRecord> records;
  for (double len : {19.0, 20.0, 27.0}) {
    for (double t : {59.9, 60.0, 80.0}) {
      RatingRecord r = base;
      r.context.word_length = len;
      r.completion_time_s = t;
      records.push_back(r);
    }
  }
  ExportFilters marks;
  const auto marked = apply_filters(records, {}, marks);
  expect(marked.size() == records.size(), "marking dropped records");
  for (const auto& row : marked) {
    const bool len_flag = std::count(row.flags.begin(), row.flags.end(), kLengthOutlier) > 0;
    const bool time_flag = std::count(row.flags.begin(), row.flags.end(), kTimeOutlier) > 0;
    expect(len_flag == (row.record.context.word_length >= 20.0), "length flag wrong");
    expect(time_flag == (row.record.completion_time_s >= 60.0), "time flag wrong");
  }
  ExportFilters drop;
  drop.paper_filters = true;
  const auto kept = apply_filters(records, {}, drop);
  expect(kept.size() == 1 && kept[0].record.context.word_length == 19.0 && kept[0].record.completion_time_s == 59.9,
         std::to_string(kept.size()) + " records survive --paper-filters");

  // Through the service: ratings stored over the API, exported, refitted.
  StudyPlan plan;
  const auto sim = salperc::testing::simulate(default_ground_truth(), 40, 12, 5, PlanMode::single_condition, &plan);
  const auto dir = salperc::testing::temp_dir("export");
  service::StudyService svc({plan}, (dir / "log.jsonl").string());
  std::size_t next = 0;
  std::size_t slow = 0;
  for (const auto& pp : plan.participants) {
    const std::string sid = svc.create_session(plan.study_id, pp.worker_id).at("session_id");
    for (const auto& item : pp.items) {
      service::Submission sub;
      if (item.is_trap) {
        sub.rating = item.expected_rating;
        sub.completion_time_s = 3.0;
      } else {
        const RatingRecord& r = sim.records[next++];
        sub.rating = r.rating;
        sub.completion_time_s = next % 10 == 0 ? 75.0 : std::min(r.completion_time_s, 59.0);
        slow += next % 10 == 0 ? 1 : 0;
      }
      svc.submit(sid, sub);
    }
  }
  const auto all = svc.export_records(plan.study_id, ExportFilters{});
  expect(all.size() == sim.records.size(), std::to_string(all.size()) + " exported records");
  const auto filtered = svc.export_records(plan.study_id, drop);
  std::size_t long_words = 0;
  for (const auto& row : all) long_words += row.record.context.word_length >= 20.0 ? 1 : 0;
  for (const auto& row : filtered) {
    expect(row.record.completion_time_s < 60.0 && row.record.context.word_length < 20.0,
           "a flagged record survived --paper-filters");
  }
  expect(filtered.size() + slow >= all.size() - long_words && filtered.size() <= all.size() - slow,
         "filtered export has " + std::to_string(filtered.size()) + " records");

  std::istringstream csv(svc.export_text(plan.study_id, "csv", drop));
  const auto reread = records_from_csv(csv);
  expect(reread.size() == filtered.size(), "CSV round trip changed the record count");
  const ModelSpec spec = salperc::testing::smooth_spec({Covariate::saliency, Covariate::word_length}, 6, 1.0, false);
  const FittedPerceptionModel m = fit(reread, spec);
  expect(m.coefficients.allFinite(), "refit produced non-finite coefficients");
  std::filesystem::remove_all(dir);
  return std::to_string(all.size()) + " exported, " + std::to_string(filtered.size()) + " after filters; refit ok";
}

// ---------------------------------------------------------------------------
// Durability: the real binary, killed with SIGKILL right after an ack.

pid_t spawn_server(const std::string& plan, const std::string& log, const std::string& port_file) {
  const std::vector<std::string> args = {SALPERC_CLI_PATH, "serve", "--plan", plan, "--log", log,
                                         "--port", "0", "--port-file", port_file};
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0], &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  expect(rc == 0, "posix_spawn failed: " + std::to_string(rc));
  return pid;
}

int wait_for_port(const std::string& port_file) {
  for (int i = 0; i < 500; ++i) {
    std::ifstream in(port_file);
    int port = 0;
    if (in >> port && port > 0) return port;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  throw Failure{"server did not report its port"};
}

void kill_hard(pid_t pid) {
  ::kill(pid, SIGKILL);
  int status = 0;
  ::waitpid(pid, &status, 0);
}

std::string durability() {
  const auto dir = salperc::testing::temp_dir("durability");
  const SyntheticCorpus corpus = make_synthetic_corpus(6, 3);
  PlanOptions po;
  po.participants = 10;
  po.seed = 3;
  po.study_id = "dur";
  const StudyPlan plan = make_study_plan(corpus.sentences, po);
  const std::string plan_path = (dir / "plan.json").string();
  std::ofstream(plan_path) << to_json(plan).dump();
  const std::string log = (dir / "log.jsonl").string();
  int survived = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::string port_file = (dir / ("port" + std::to_string(trial))).string();
    pid_t pid = spawn_server(plan_path, log, port_file);
    std::string session;
    std::size_t acked = 0;
    try {
      httplib::Client client("127.0.0.1", wait_for_port(port_file));
      auto created = client.Post("/studies/dur/sessions",
                                 nlohmann::json{{"worker_id", "worker-" + std::to_string(trial)}}.dump(), "application/json");
      expect(created && created->status == 200, "session creation failed");
      session = nlohmann::json::parse(created->body).at("session_id");
      for (int k = 0; k < 3; ++k) {
        auto ack = client.Post("/sessions/" + session + "/ratings",
                               nlohmann::json{{"rating", 4}, {"completion_time_s", 2.5}}.dump(), "application/json");
        expect(ack && ack->status == 200, "rating was not acknowledged");
        acked = nlohmann::json::parse(ack->body).at("cursor");
      }
    } catch (...) {
      kill_hard(pid);
      throw;
    }
    kill_hard(pid);

    const std::string port_file2 = port_file + "-restart";
    pid = spawn_server(plan_path, log, port_file2);
    try {
      httplib::Client client("127.0.0.1", wait_for_port(port_file2));
      auto info = client.Get("/sessions/" + session);
      expect(info && info->status == 200, "session lost after restart");
      const std::size_t cursor = nlohmann::json::parse(info->body).at("cursor");
      if (cursor == acked) ++survived;
    } catch (...) {
      kill_hard(pid);
      throw;
    }
    kill_hard(pid);
  }
  std::filesystem::remove_all(dir);
  expect(survived == 10, std::to_string(survived) + "/10 trials kept the last acknowledged rating");
  return "10/10 trials kept the last acknowledged rating";
}

}  // namespace

int main() {
  Warnings::set_handler([](std::string_view) {});
  std::optional<FittedPerceptionModel> wl_model;
  auto with_model = [&](std::string (*f)(const FittedPerceptionModel&)) {
    return [&wl_model, f] {
      if (!wl_model) wl_model = word_length_model();
      return f(*wl_model);
    };
  };
  const std::vector<std::pair<std::string, std::function<std::string()>>> criteria = {
      {"gradient-correctness", gradient_correctness},
      {"oracle-recovery", oracle_recovery},
      {"averaging-equivalence", averaging_equivalence},
      {"correction-efficacy", correction_efficacy},
      {"correction-sign-pattern", with_model(correction_sign_pattern)},
      {"color-exactness", color_exactness},
      {"reference-context-determinism", with_model(reference_determinism)},
      {"protocol-invariants", protocol_invariants},
      {"export-filter-fidelity", export_filter_fidelity},
      {"durability", durability},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Stopwatch sw;
    try {
      const std::string detail = run();
      std::cout << "PASS " << name << " (" << fmt(sw.seconds()) << " s): " << detail << std::endl;
    } catch (const Failure& f) {
      ++failed;
      std::cout << "FAIL " << name << ": " << f.message << std::endl;
    } catch (const std::exception& e) {
      ++failed;
      std::cout << "FAIL " << name << ": exception: " << e.what() << std::endl;
    }
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
