#pragma once

// Rating records and their CSV / JSONL export schema, shared by the study
// service, the simulator and the model-fitting CLI.

#include <cstdio>
#include <istream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"
#include "salperc/features.hpp"

namespace salperc {

/// One explainee response to one display event.
struct RatingRecord {
  std::string worker_id;
  std::string sentence_id;
  int token_index = 0;  ///< 0-based index of the rated token
  TokenContext context;
  int rating = 1;
  double completion_time_s = 1.0;
  std::optional<std::string> comment;
  int display_index = 1;
  Condition condition = Condition::saliency;

  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

inline void validate(const RatingRecord& r, int categories = 7) {
  if (r.rating < 1 || r.rating > categories) {
    throw Error(ErrorCode::validation, "rating " + std::to_string(r.rating) + " outside 1.." + std::to_string(categories));
  }
  if (!(r.completion_time_s > 0.0)) throw Error(ErrorCode::validation, "completion time must be positive");
}

inline nlohmann::json to_json(const RatingRecord& r) {
  nlohmann::json j = {{"worker_id", r.worker_id},
                      {"sentence_id", r.sentence_id},
                      {"token_index", r.token_index},
                      {"rating", r.rating},
                      {"completion_time_s", r.completion_time_s},
                      {"comment", r.comment ? nlohmann::json(*r.comment) : nlohmann::json(nullptr)},
                      {"display_index", r.display_index},
                      {"condition", to_string(r.condition)},
                      {"context", to_json(r.context)}};
  return j;
}

inline RatingRecord rating_record_from_json(const nlohmann::json& j) {
  RatingRecord r;
  r.worker_id = j.at("worker_id").get<std::string>();
  r.sentence_id = j.at("sentence_id").get<std::string>();
  r.token_index = j.at("token_index").get<int>();
  r.rating = j.at("rating").get<int>();
  r.completion_time_s = j.at("completion_time_s").get<double>();
  if (j.contains("comment") && !j["comment"].is_null()) r.comment = j["comment"].get<std::string>();
  r.display_index = j.at("display_index").get<int>();
  r.condition = condition_from_string(j.at("condition").get<std::string>());
  r.context = token_context_from_json(j.at("context"));
  r.context.display_index = r.display_index;
  r.context.condition = r.condition;
  return r;
}

// ---------------------------------------------------------------------------
// Export filters

inline constexpr const char* kLengthOutlier = "len_outlier";
inline constexpr const char* kTimeOutlier = "ct_outlier";
inline constexpr const char* kTrapFail = "trap_fail";

struct ExportFilters {
  double max_word_length = 20.0;       ///< flag words with this many characters or more
  double max_completion_time_s = 60.0; ///< flag ratings taking this long or longer
  bool paper_filters = false;          ///< drop flagged records instead of only marking them
};

struct FlaggedRecord {
  RatingRecord record;
  std::vector<std::string> flags;
};

/// Marks outliers; with paper_filters the flagged records are dropped.
inline std::vector<FlaggedRecord> apply_filters(const std::vector<RatingRecord>& records,
                                                const std::set<std::string>& trap_failed_workers,
                                                const ExportFilters& filters) {
  std::vector<FlaggedRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    FlaggedRecord f{r, {}};
    if (r.context.word_length >= filters.max_word_length) f.flags.emplace_back(kLengthOutlier);
    if (r.completion_time_s >= filters.max_completion_time_s) f.flags.emplace_back(kTimeOutlier);
    if (trap_failed_workers.count(r.worker_id)) f.flags.emplace_back(kTrapFail);
    if (filters.paper_filters && !f.flags.empty()) continue;
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

inline std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Splits one logical CSV record; quoted fields may span lines.
inline bool read_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  char c = 0;
  while (in.get(c)) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

}  // namespace csv

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> columns = {
      "worker_id",       "sentence_id",    "token_index",    "rating",
      "completion_time_s", "comment",      "display_index",  "condition",
      "saliency",        "word_length",    "word_frequency", "sentence_length",
      "sentiment_polarity", "saliency_rank", "word_position", "capitalization",
      "dependency_relation", "flags"};
  return columns;
}

inline std::string to_csv(const std::vector<FlaggedRecord>& rows) {
  std::string out;
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) {
    out += (i ? "," : "") + cols[i];
  }
  out += '\n';
  for (const auto& [r, flags] : rows) {
    std::string flag_text;
    for (std::size_t i = 0; i < flags.size(); ++i) flag_text += (i ? ";" : "") + flags[i];
    const TokenContext& x = r.context;
    const std::vector<std::string> fields = {csv::escape(r.worker_id),
                                             csv::escape(r.sentence_id),
                                             std::to_string(r.token_index),
                                             std::to_string(r.rating),
                                             csv::number(r.completion_time_s),
                                             csv::escape(r.comment.value_or("")),
                                             std::to_string(r.display_index),
                                             std::string(to_string(r.condition)),
                                             csv::number(x.saliency),
                                             csv::number(x.word_length),
                                             csv::number(x.word_frequency),
                                             csv::number(x.sentence_length),
                                             csv::number(x.sentiment_polarity),
                                             csv::number(x.saliency_rank),
                                             csv::number(x.word_position),
                                             std::string(to_string(x.capitalization)),
                                             csv::escape(x.dependency_relation),
                                             flag_text};
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += fields[i];
    }
    out += '\n';
  }
  return out;
}

inline std::string to_jsonl(const std::vector<FlaggedRecord>& rows) {
  std::string out;
  for (const auto& [r, flags] : rows) {
    nlohmann::json j = to_json(r);
    j["flags"] = flags;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<RatingRecord> records_from_csv(std::istream& in) {
  std::vector<std::string> header;
  if (!csv::read_record(in, header)) return {};
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index[header[i]] = i;
  for (const auto& c : csv_columns()) {
    if (c != "flags" && !index.count(c)) throw Error(ErrorCode::input, "CSV is missing column '" + c + "'");
  }
  std::vector<RatingRecord> records;
  std::vector<std::string> f;
  std::size_t line = 1;
  while (csv::read_record(in, f)) {
    ++line;
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() < header.size()) {
      throw Error(ErrorCode::input, "CSV record " + std::to_string(line) + ": expected " + std::to_string(header.size()) +
                                        " fields, got " + std::to_string(f.size()));
    }
    auto get = [&](const char* name) -> const std::string& { return f[index.at(name)]; };
    try {
      RatingRecord r;
      r.worker_id = get("worker_id");
      r.sentence_id = get("sentence_id");
      r.token_index = std::stoi(get("token_index"));
      r.rating = std::stoi(get("rating"));
      r.completion_time_s = std::stod(get("completion_time_s"));
      if (!get("comment").empty()) r.comment = get("comment");
      r.display_index = std::stoi(get("display_index"));
      r.condition = condition_from_string(get("condition"));
      TokenContext& x = r.context;
      x.saliency = std::stod(get("saliency"));
      x.word_length = std::stod(get("word_length"));
      x.word_frequency = std::stod(get("word_frequency"));
      x.sentence_length = std::stod(get("sentence_length"));
      x.sentiment_polarity = std::stod(get("sentiment_polarity"));
      x.saliency_rank = std::stod(get("saliency_rank"));
      x.word_position = std::stod(get("word_position"));
      x.capitalization = capitalization_from_string(get("capitalization"));
      x.dependency_relation = get("dependency_relation");
      x.display_index = r.display_index;
      x.condition = r.condition;
      records.push_back(std::move(r));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::input, "CSV record " + std::to_string(line) + ": " + e.what());
    }
  }
  return records;
}

inline std::vector<RatingRecord> records_from_jsonl(std::istream& in) {
  std::vector<RatingRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      records.push_back(rating_record_from_json(nlohmann::json::parse(line)));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::input, "JSONL line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace salperc
