#pragma once

// Live rating studies: participant sessions over a study plan, an append-only
// JSONL log that is synced to disk before any acknowledgement, trap checks,
// and filtered export. StudyService holds the state; HttpStudyServer exposes
// it as a small JSON API.
//
//   POST /studies/{id}/sessions          {"worker_id": "..."}
//   GET  /sessions/{id}/next
//   POST /sessions/{id}/ratings          {"rating": 1..7, "completion_time_ms": ..., "comment": ..., "cursor": k}
//   GET  /studies/{id}/export?format=csv|jsonl&paper-filters=true

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <httplib.h>
// <resolv.h> defines _res as a macro, which breaks Eigen's kernels.
#undef _res
#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"
#include "salperc/records.hpp"
#include "salperc/simulator.hpp"
#include "salperc/visualization.hpp"

namespace salperc::service {

enum class SessionStatus { active, complete };

inline std::string_view to_string(SessionStatus s) { return s == SessionStatus::active ? "active" : "complete"; }

struct TrapResult {
  std::size_t cursor = 0;
  int rating = 0;
  bool passed = false;
};

struct Session {
  std::string id;
  std::string study_id;
  std::string worker_id;
  std::size_t slot = 0;
  std::size_t cursor = 0;
  std::size_t item_count = 0;
  std::vector<TrapResult> traps;

  [[nodiscard]] SessionStatus status() const {
    return cursor >= item_count ? SessionStatus::complete : SessionStatus::active;
  }
};

struct Submission {
  int rating = 0;
  double completion_time_s = 0.0;
  std::optional<std::string> comment;
  std::optional<std::size_t> cursor;  ///< idempotency key; defaults to the current cursor
};

/// Parses a rating request body; completion time may be given in seconds or
/// milliseconds.
inline Submission submission_from_json(const nlohmann::json& j) {
  Submission s;
  if (!j.is_object()) throw Error(ErrorCode::validation, "request body must be a JSON object");
  if (!j.contains("rating") || !j["rating"].is_number_integer()) {
    throw Error(ErrorCode::validation, "field 'rating' must be an integer");
  }
  s.rating = j["rating"].get<int>();
  if (j.contains("completion_time_s") && j["completion_time_s"].is_number()) {
    s.completion_time_s = j["completion_time_s"].get<double>();
  } else if (j.contains("completion_time_ms") && j["completion_time_ms"].is_number()) {
    s.completion_time_s = j["completion_time_ms"].get<double>() / 1000.0;
  } else {
    throw Error(ErrorCode::validation, "one of 'completion_time_s' or 'completion_time_ms' is required");
  }
  if (j.contains("comment") && j["comment"].is_string() && !j["comment"].get<std::string>().empty()) {
    s.comment = j["comment"].get<std::string>();
  }
  if (j.contains("cursor") && !j["cursor"].is_null()) {
    if (!j["cursor"].is_number_unsigned() && !(j["cursor"].is_number_integer() && j["cursor"].get<long long>() >= 0)) {
      throw Error(ErrorCode::validation, "field 'cursor' must be a non-negative integer");
    }
    s.cursor = j["cursor"].get<std::size_t>();
  }
  return s;
}

/// Append-only JSONL file; every append is flushed and fsynced before it
/// returns. A torn final line left by a crash is cut off on open.
class DurableLog {
 public:
  explicit DurableLog(std::string path) : path_(std::move(path)) {
    repair();
    fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(ErrorCode::io, "cannot open log '" + path_ + "': " + std::strerror(errno));
  }
  DurableLog(const DurableLog&) = delete;
  DurableLog& operator=(const DurableLog&) = delete;
  ~DurableLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  [[nodiscard]] const std::string& path() const { return path_; }

  /// Complete lines currently in the log.
  [[nodiscard]] std::vector<std::string> lines() const {
    std::vector<std::string> out;
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.push_back(line);
    }
    return out;
  }

  void append(const nlohmann::json& event) {
    const std::string line = event.dump() + "\n";
    std::lock_guard lock(mutex_);
    std::size_t written = 0;
    while (written < line.size()) {
      const ssize_t n = ::write(fd_, line.data() + written, line.size() - written);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(ErrorCode::io, "append to log '" + path_ + "' failed: " + std::strerror(errno));
      }
      written += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw Error(ErrorCode::io, "fsync of log '" + path_ + "' failed: " + std::strerror(errno));
  }

 private:
  void repair() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (content.empty() || content.back() == '\n') return;
    const auto keep = content.find_last_of('\n');
    const off_t size = keep == std::string::npos ? 0 : static_cast<off_t>(keep + 1);
    warn("log '" + path_ + "': dropping a torn final line of " + std::to_string(content.size() - size) + " bytes");
    if (::truncate(path_.c_str(), size) != 0) {
      throw Error(ErrorCode::io, "cannot repair log '" + path_ + "': " + std::strerror(errno));
    }
  }

  std::string path_;
  int fd_ = -1;
  std::mutex mutex_;
};

struct ServiceOptions {
  RenderSpec render;
  Lexicons lexicons;
};

/// Sessions, responses and exports for one or more study plans, persisted in
/// a single log. All public methods are thread-safe; operations on one
/// session are serialized by that session's lock.
class StudyService {
 public:
  StudyService(std::vector<StudyPlan> plans, const std::string& log_path, ServiceOptions options = {})
      : options_(std::move(options)), log_(log_path) {
    for (auto& p : plans) {
      if (p.study_id.empty() || p.study_id.find_first_of("/?#&") != std::string::npos) {
        throw Error(ErrorCode::config, "study id '" + p.study_id + "' is not URL-safe");
      }
      const std::string problem = check_plan(p);
      if (!problem.empty()) throw Error(ErrorCode::config, "study '" + p.study_id + "': " + problem);
      auto id = p.study_id;
      if (!studies_.emplace(id, Study{std::move(p), {}, {}}).second) {
        throw Error(ErrorCode::config, "study '" + id + "' is defined twice");
      }
    }
    replay();
  }

  [[nodiscard]] std::vector<std::string> study_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, s] : studies_) ids.push_back(id);
    return ids;
  }

  /// Allocates the next free participant slot of the study's plan.
  nlohmann::json create_session(const std::string& study_id, const std::string& worker_id) {
    if (worker_id.empty()) throw Error(ErrorCode::validation, "worker_id must not be empty");
    std::unique_lock lock(sessions_mutex_);
    Study& study = find_study(study_id);
    if (study.workers.count(worker_id)) {
      throw Error(ErrorCode::conflict, "worker '" + worker_id + "' already has a session in study '" + study_id + "'");
    }
    const std::size_t slot = study.session_ids.size();
    if (slot >= study.plan.participants.size()) {
      throw Error(ErrorCode::exhausted, "study '" + study_id + "' has no free participant slot (" +
                                            std::to_string(study.plan.participants.size()) + " slots)");
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-s%04zu", slot + 1);
    const std::string session_id = study_id + buf;
    log_.append({{"event", "session"},
                 {"study_id", study_id},
                 {"session_id", session_id},
                 {"worker_id", worker_id},
                 {"slot", slot}});
    add_session(study, session_id, worker_id, slot);
    const Entry& e = *sessions_.at(session_id);
    return session_json(e.session, study.plan);
  }

  [[nodiscard]] nlohmann::json session_info(const std::string& session_id) const {
    const Entry& e = find_entry(session_id);
    std::lock_guard lock(e.mutex);
    return session_json(e.session, studies_.at(e.session.study_id).plan);
  }

  /// The item at the cursor; repeated calls return the same item.
  [[nodiscard]] nlohmann::json next_item(const std::string& session_id) const {
    const Entry& e = find_entry(session_id);
    std::lock_guard lock(e.mutex);
    const Session& s = e.session;
    const StudyPlan& plan = studies_.at(s.study_id).plan;
    nlohmann::json j = session_json(s, plan);
    if (s.status() == SessionStatus::complete) {
      j["end_of_study"] = true;
      return j;
    }
    j["end_of_study"] = false;
    j["item"] = item_payload(plan, plan.participants[s.slot].items[s.cursor]);
    return j;
  }

  /// Stores the response for the cursor item, synced to disk before return.
  nlohmann::json submit(const std::string& session_id, const Submission& sub) {
    Entry& e = find_entry(session_id);
    std::lock_guard lock(e.mutex);
    Session& s = e.session;
    const StudyPlan& plan = studies_.at(s.study_id).plan;
    const int categories = 7;
    if (s.status() == SessionStatus::complete) {
      throw Error(ErrorCode::conflict, "session '" + session_id + "' is already complete");
    }
    if (sub.cursor && *sub.cursor != s.cursor) {
      throw Error(ErrorCode::conflict, "item " + std::to_string(*sub.cursor) + " of session '" + session_id +
                                           "' is not the current item (" + std::to_string(s.cursor) + ")");
    }
    if (sub.rating < 1 || sub.rating > categories) {
      throw Error(ErrorCode::validation, "rating " + std::to_string(sub.rating) + " outside 1.." +
                                             std::to_string(categories));
    }
    if (!(sub.completion_time_s > 0.0) || !std::isfinite(sub.completion_time_s)) {
      throw Error(ErrorCode::validation, "completion time must be positive");
    }
    const PlanItem& item = plan.participants[s.slot].items[s.cursor];
    nlohmann::json event = {{"session_id", session_id}, {"cursor", s.cursor}};
    if (item.is_trap) {
      event["event"] = "trap";
      event["rating"] = sub.rating;
      event["passed"] = sub.rating == item.expected_rating;
      event["completion_time_s"] = sub.completion_time_s;
    } else {
      event["event"] = "rating";
      event["record"] = to_json(make_record(plan, s, item, sub));
    }
    log_.append(event);
    apply_event(e, event);
    nlohmann::json ack = session_json(s, plan);
    ack["ok"] = true;
    ack["stored_cursor"] = s.cursor - 1;
    return ack;
  }

  /// All stored ratings of a study in log order, flagged (or dropped with
  /// paper_filters). Workers who failed every trap they answered are flagged.
  [[nodiscard]] std::vector<FlaggedRecord> export_records(const std::string& study_id,
                                                          const ExportFilters& filters) const {
    std::vector<RatingRecord> records;
    std::map<std::string, std::pair<int, int>> traps;  // answered, failed per worker
    {
      std::shared_lock lock(sessions_mutex_);
      const Study& study = find_study(study_id);
      (void)study;
    }
    std::map<std::string, std::string> worker_of;
    for (const auto& line : log_.lines()) {
      const auto j = nlohmann::json::parse(line);
      const std::string event = j.at("event").get<std::string>();
      if (event == "session") {
        if (j.at("study_id").get<std::string>() == study_id) {
          worker_of[j.at("session_id").get<std::string>()] = j.at("worker_id").get<std::string>();
        }
      } else if (auto it = worker_of.find(j.at("session_id").get<std::string>()); it != worker_of.end()) {
        if (event == "rating") {
          records.push_back(rating_record_from_json(j.at("record")));
        } else if (event == "trap") {
          auto& [answered, failed] = traps[it->second];
          ++answered;
          failed += j.at("passed").get<bool>() ? 0 : 1;
        }
      }
    }
    std::set<std::string> trap_failed;
    for (const auto& [w, c] : traps) {
      if (c.first > 0 && c.first == c.second) trap_failed.insert(w);
    }
    return apply_filters(records, trap_failed, filters);
  }

  [[nodiscard]] std::string export_text(const std::string& study_id, const std::string& format,
                                        const ExportFilters& filters) const {
    if (format != "csv" && format != "jsonl") {
      throw Error(ErrorCode::validation, "export format must be 'csv' or 'jsonl', got '" + format + "'");
    }
    const auto rows = export_records(study_id, filters);
    return format == "csv" ? to_csv(rows) : to_jsonl(rows);
  }

  /// Payload for one plan item: tokens, target, mode and rendered markup.
  [[nodiscard]] nlohmann::json item_payload(const StudyPlan& plan, const PlanItem& item) const {
    const Sentence& sentence = item_sentence(plan, item);
    RenderSpec spec = options_.render;
    std::string mode;
    Rendering rendering;
    switch (item.condition) {
      case Condition::saliency:
        spec.mode = RenderMode::heatmap;
        rendering = render_heatmap(sentence, item.displayed, spec);
        mode = "heatmap";
        break;
      case Condition::corrected:
        spec.mode = RenderMode::corrected_heatmap;
        rendering = render_heatmap(sentence, item.displayed, spec);
        mode = "corrected_heatmap";
        break;
      case Condition::bars:
        rendering = render_bars(sentence, item.displayed, spec);
        mode = "bars";
        break;
    }
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : sentence.tokens) tokens.push_back(t.surface);
    const std::string& word = sentence.tokens[item.target].surface;
    return {{"tokens", tokens},
            {"target_index", item.target},
            {"target_word", word},
            {"question", "How important (1-7) do you think the word \"" + word + "\" was to the model?"},
            {"scale", {{"min", 1}, {"max", 7}, {"min_label", "not important at all"}, {"max_label", "very important"}}},
            {"mode", mode},
            {"markup", rendering.svg}};
  }

 private:
  struct Entry {
    Session session;
    mutable std::mutex mutex;
  };

  struct Study {
    StudyPlan plan;
    std::vector<std::string> session_ids;
    std::set<std::string> workers;
  };

  Study& find_study(const std::string& id) {
    auto it = studies_.find(id);
    if (it == studies_.end()) throw Error(ErrorCode::not_found, "unknown study '" + id + "'");
    return it->second;
  }
  [[nodiscard]] const Study& find_study(const std::string& id) const {
    auto it = studies_.find(id);
    if (it == studies_.end()) throw Error(ErrorCode::not_found, "unknown study '" + id + "'");
    return it->second;
  }

  Entry& find_entry(const std::string& session_id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw Error(ErrorCode::not_found, "unknown session '" + session_id + "'");
    return *it->second;
  }

  void add_session(Study& study, const std::string& session_id, const std::string& worker_id, std::size_t slot) {
    auto e = std::make_unique<Entry>();
    e->session.id = session_id;
    e->session.study_id = study.plan.study_id;
    e->session.worker_id = worker_id;
    e->session.slot = slot;
    e->session.item_count = study.plan.participants[slot].items.size();
    sessions_.emplace(session_id, std::move(e));
    study.session_ids.push_back(session_id);
    study.workers.insert(worker_id);
  }

  static nlohmann::json session_json(const Session& s, const StudyPlan& plan) {
    return {{"session_id", s.id},
            {"study_id", s.study_id},
            {"worker_id", s.worker_id},
            {"slot", s.slot},
            {"ordering", plan.participants[s.slot].ordering},
            {"cursor", s.cursor},
            {"status", to_string(s.status())},
            {"progress", {{"done", s.cursor}, {"total", s.item_count}}}};
  }

  RatingRecord make_record(const StudyPlan& plan, const Session& s, const PlanItem& item, const Submission& sub) const {
    const Sentence& sentence = item_sentence(plan, item);
    const double display_index = static_cast<double>(s.cursor + 1);
    const auto contexts = extract(sentence, item.saliency, display_index, options_.lexicons, item.condition);
    RatingRecord r;
    r.worker_id = s.worker_id;
    r.sentence_id = sentence.id;
    r.token_index = static_cast<int>(item.target);
    r.context = contexts[item.target];
    r.rating = sub.rating;
    r.completion_time_s = sub.completion_time_s;
    r.comment = sub.comment;
    r.display_index = static_cast<int>(s.cursor + 1);
    r.condition = item.condition;
    return r;
  }

  static void apply_event(Entry& e, const nlohmann::json& event) {
    Session& s = e.session;
    const auto cursor = event.at("cursor").get<std::size_t>();
    if (cursor != s.cursor) {
      throw Error(ErrorCode::input, "log entry for session '" + s.id + "' has cursor " + std::to_string(cursor) +
                                        ", expected " + std::to_string(s.cursor));
    }
    if (event.at("event") == "trap") {
      s.traps.push_back({cursor, event.at("rating").get<int>(), event.at("passed").get<bool>()});
    }
    ++s.cursor;
  }

  void replay() {
    std::size_t line_no = 0;
    for (const auto& line : log_.lines()) {
      ++line_no;
      try {
        const auto j = nlohmann::json::parse(line);
        const std::string event = j.at("event").get<std::string>();
        if (event == "session") {
          Study& study = find_study(j.at("study_id").get<std::string>());
          const auto slot = j.at("slot").get<std::size_t>();
          if (slot != study.session_ids.size() || slot >= study.plan.participants.size()) {
            throw Error(ErrorCode::input, "unexpected slot " + std::to_string(slot));
          }
          add_session(study, j.at("session_id").get<std::string>(), j.at("worker_id").get<std::string>(), slot);
        } else if (event == "rating" || event == "trap") {
          auto it = sessions_.find(j.at("session_id").get<std::string>());
          if (it == sessions_.end()) throw Error(ErrorCode::input, "response for an unknown session");
          apply_event(*it->second, j);
        } else {
          throw Error(ErrorCode::input, "unknown event '" + event + "'");
        }
      } catch (const std::exception& ex) {
        throw Error(ErrorCode::input, "log '" + log_.path() + "' line " + std::to_string(line_no) + ": " + ex.what());
      }
    }
  }

  ServiceOptions options_;
  DurableLog log_;
  std::map<std::string, Study> studies_;
  std::map<std::string, std::unique_ptr<Entry>> sessions_;
  mutable std::shared_mutex sessions_mutex_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict:
    case ErrorCode::exhausted: return 409;
    case ErrorCode::validation:
    case ErrorCode::input:
    case ErrorCode::config: return 400;
    default: return 500;
  }
}

inline nlohmann::json error_body(ErrorCode code, const std::string& message) {
  return {{"error", {{"code", to_string(code)}, {"message", message}}}};
}

/// HTTP front end for a StudyService.
class HttpStudyServer {
 public:
  explicit HttpStudyServer(StudyService& service) : service_(service) { routes(); }

  /// Binds to host:port (port 0 picks a free one); returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Serves until stop() is called.
  void serve() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  [[nodiscard]] bool running() const { return server_.is_running(); }

 private:
  template <class F>
  void guarded(httplib::Response& res, F&& f) {
    try {
      nlohmann::json body = f();
      res.status = 200;
      res.set_content(body.dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(error_body(e.code(), e.what()).dump(), "application/json");
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(error_body(ErrorCode::validation, std::string("invalid JSON: ") + e.what()).dump(),
                      "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_body(ErrorCode::io, e.what()).dump(), "application/json");
    }
  }

  void routes() {
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"ok":true})", "application/json");
    });
    server_.Post(R"(/studies/([^/]+)/sessions)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body.empty() ? "{}" : req.body);
        if (!body.is_object() || !body.contains("worker_id") || !body["worker_id"].is_string()) {
          throw Error(ErrorCode::validation, "field 'worker_id' must be a string");
        }
        return service_.create_session(req.matches[1], body["worker_id"].get<std::string>());
      });
    });
    server_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return service_.session_info(req.matches[1]); });
    });
    server_.Get(R"(/sessions/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return service_.next_item(req.matches[1]); });
    });
    server_.Post(R"(/sessions/([^/]+)/ratings)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return service_.submit(req.matches[1], submission_from_json(nlohmann::json::parse(req.body))); });
    });
    server_.Get(R"(/studies/([^/]+)/export)", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const std::string format = req.has_param("format") ? req.get_param_value("format") : "csv";
        ExportFilters filters;
        if (req.has_param("paper-filters")) {
          const std::string v = req.get_param_value("paper-filters");
          filters.paper_filters = v == "true" || v == "1" || v.empty();
        }
        const std::string text = service_.export_text(req.matches[1], format, filters);
        res.status = 200;
        res.set_content(text, format == "csv" ? "text/csv; charset=utf-8" : "application/x-ndjson");
      } catch (const Error& e) {
        res.status = http_status(e.code());
        res.set_content(error_body(e.code(), e.what()).dump(), "application/json");
      }
    });
  }

  StudyService& service_;
  httplib::Server server_;
};

}  // namespace salperc::service
