#pragma once

// Sentences, saliency maps and the per-token covariate vector consumed by the
// perception model and the correction loop.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "salperc/diagnostics.hpp"

namespace salperc {

struct Token {
  std::string surface;
  std::optional<std::string> lemma;
  std::optional<std::string> deprel;
  std::optional<int> head;
};

struct Sentence {
  std::string id;
  std::vector<Token> tokens;
  std::string language = "en";

  // Corpus filter flags, set by ingest_conllu on request.
  bool has_multiword = false;
  bool non_unique = false;
  bool length_outlier = false;

  [[nodiscard]] std::size_t size() const { return tokens.size(); }
};

struct SaliencyMap {
  std::string sentence_id;
  std::vector<double> scores;
};

enum class Capitalization { lower, first_capital, all_capital };

/// Visualization condition an item was displayed under.
enum class Condition { saliency, corrected, bars };

inline std::string_view to_string(Capitalization c) {
  switch (c) {
    case Capitalization::lower: return "lower";
    case Capitalization::first_capital: return "first_capital";
    case Capitalization::all_capital: return "all_capital";
  }
  return "lower";
}

inline Capitalization capitalization_from_string(std::string_view s) {
  if (s == "lower") return Capitalization::lower;
  if (s == "first_capital") return Capitalization::first_capital;
  if (s == "all_capital") return Capitalization::all_capital;
  throw Error(ErrorCode::input, "unknown capitalization '" + std::string(s) + "'");
}

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::saliency: return "saliency";
    case Condition::corrected: return "corrected";
    case Condition::bars: return "bars";
  }
  return "saliency";
}

inline Condition condition_from_string(std::string_view s) {
  if (s == "saliency") return Condition::saliency;
  if (s == "corrected") return Condition::corrected;
  if (s == "bars") return Condition::bars;
  throw Error(ErrorCode::input, "unknown visualization condition '" + std::string(s) + "'");
}

/// Covariates of one token in one display event. Numeric fields are doubles
/// so that sampled reference contexts may take non-integral values.
struct TokenContext {
  double saliency = 0.0;
  double word_length = 1.0;
  double word_frequency = 0.0;
  double sentence_length = 1.0;
  double display_index = 1.0;
  double sentiment_polarity = 0.0;
  double saliency_rank = 1.0;
  double word_position = 1.0;
  Capitalization capitalization = Capitalization::lower;
  std::string dependency_relation = "unknown";
  Condition condition = Condition::saliency;

  friend bool operator==(const TokenContext&, const TokenContext&) = default;
};

enum class Covariate {
  saliency,
  word_length,
  word_frequency,
  sentence_length,
  display_index,
  sentiment_polarity,
  saliency_rank,
  word_position,
  capitalization,
  dependency_relation,
  condition,
};

inline constexpr Covariate kAllCovariates[] = {
    Covariate::saliency,           Covariate::word_length,     Covariate::word_frequency,
    Covariate::sentence_length,    Covariate::display_index,   Covariate::sentiment_polarity,
    Covariate::saliency_rank,      Covariate::word_position,   Covariate::capitalization,
    Covariate::dependency_relation, Covariate::condition,
};

inline std::string_view to_string(Covariate c) {
  switch (c) {
    case Covariate::saliency: return "saliency";
    case Covariate::word_length: return "word_length";
    case Covariate::word_frequency: return "word_frequency";
    case Covariate::sentence_length: return "sentence_length";
    case Covariate::display_index: return "display_index";
    case Covariate::sentiment_polarity: return "sentiment_polarity";
    case Covariate::saliency_rank: return "saliency_rank";
    case Covariate::word_position: return "word_position";
    case Covariate::capitalization: return "capitalization";
    case Covariate::dependency_relation: return "dependency_relation";
    case Covariate::condition: return "condition";
  }
  return "?";
}

inline Covariate covariate_from_string(std::string_view s) {
  for (Covariate c : kAllCovariates) {
    if (to_string(c) == s) return c;
  }
  throw Error(ErrorCode::config, "unknown covariate '" + std::string(s) + "'");
}

inline bool is_numeric(Covariate c) {
  return c != Covariate::capitalization && c != Covariate::dependency_relation && c != Covariate::condition;
}

inline double numeric_value(const TokenContext& x, Covariate c) {
  switch (c) {
    case Covariate::saliency: return x.saliency;
    case Covariate::word_length: return x.word_length;
    case Covariate::word_frequency: return x.word_frequency;
    case Covariate::sentence_length: return x.sentence_length;
    case Covariate::display_index: return x.display_index;
    case Covariate::sentiment_polarity: return x.sentiment_polarity;
    case Covariate::saliency_rank: return x.saliency_rank;
    case Covariate::word_position: return x.word_position;
    default: break;
  }
  throw Error(ErrorCode::config, "covariate '" + std::string(to_string(c)) + "' is not numeric");
}

inline void set_numeric(TokenContext& x, Covariate c, double v) {
  switch (c) {
    case Covariate::saliency: x.saliency = v; return;
    case Covariate::word_length: x.word_length = v; return;
    case Covariate::word_frequency: x.word_frequency = v; return;
    case Covariate::sentence_length: x.sentence_length = v; return;
    case Covariate::display_index: x.display_index = v; return;
    case Covariate::sentiment_polarity: x.sentiment_polarity = v; return;
    case Covariate::saliency_rank: x.saliency_rank = v; return;
    case Covariate::word_position: x.word_position = v; return;
    default: break;
  }
  throw Error(ErrorCode::config, "covariate '" + std::string(to_string(c)) + "' is not numeric");
}

inline std::string categorical_level(const TokenContext& x, Covariate c) {
  switch (c) {
    case Covariate::capitalization: return std::string(to_string(x.capitalization));
    case Covariate::dependency_relation: return x.dependency_relation;
    case Covariate::condition: return std::string(to_string(x.condition));
    default: break;
  }
  throw Error(ErrorCode::config, "covariate '" + std::string(to_string(c)) + "' is not categorical");
}

inline void set_categorical(TokenContext& x, Covariate c, const std::string& level) {
  switch (c) {
    case Covariate::capitalization: x.capitalization = capitalization_from_string(level); return;
    case Covariate::dependency_relation: x.dependency_relation = level; return;
    case Covariate::condition: x.condition = condition_from_string(level); return;
    default: break;
  }
  throw Error(ErrorCode::config, "covariate '" + std::string(to_string(c)) + "' is not categorical");
}

// ---------------------------------------------------------------------------
// Text helpers

namespace text {

/// Decodes UTF-8 into code points; invalid bytes decode as themselves.
inline std::vector<char32_t> code_points(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    char32_t cp = c;
    if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    }
    bool ok = i + extra < s.size();
    for (std::size_t e = 1; ok && e <= extra; ++e) {
      ok = (static_cast<unsigned char>(s[i + e]) & 0xC0) == 0x80;
    }
    if (!ok) {
      out.push_back(c);
      ++i;
      continue;
    }
    for (std::size_t e = 1; e <= extra; ++e) cp = (cp << 6) | (static_cast<unsigned char>(s[i + e]) & 0x3F);
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

/// Number of Unicode scalar values.
inline std::size_t length(std::string_view s) { return code_points(s).size(); }

inline bool is_upper(char32_t c) {
  return (c >= U'A' && c <= U'Z') || (c >= 0xC0 && c <= 0xDE && c != 0xD7) || (c >= 0x391 && c <= 0x3A9) ||
         (c >= 0x410 && c <= 0x42F);
}

inline bool is_lower(char32_t c) {
  return (c >= U'a' && c <= U'z') || (c >= 0xDF && c <= 0xFF && c != 0xF7) || (c >= 0x3B1 && c <= 0x3C9) ||
         (c >= 0x430 && c <= 0x44F);
}

inline bool is_alpha(char32_t c) { return is_upper(c) || is_lower(c); }

/// ASCII lowercase; multi-byte sequences pass through unchanged.
inline std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace text

struct CapitalizationOptions {
  /// Single uppercase letters ("I", "A") count as first-capital.
  bool single_letter_is_first_capital = true;
};

inline Capitalization capitalization_class(std::string_view surface, CapitalizationOptions options = {}) {
  std::size_t letters = 0;
  std::size_t upper = 0;
  std::optional<bool> first_upper;
  for (char32_t c : text::code_points(surface)) {
    if (!text::is_alpha(c)) continue;
    ++letters;
    const bool up = text::is_upper(c);
    if (up) ++upper;
    if (!first_upper) first_upper = up;
  }
  if (letters == 0) return Capitalization::lower;
  if (upper == letters && (letters >= 2 || !options.single_letter_is_first_capital)) {
    return Capitalization::all_capital;
  }
  if (*first_upper) return Capitalization::first_capital;
  return Capitalization::lower;
}

/// Rank of scores[index] (0-based) among all scores, normalized by the
/// sentence length: 1/l for the highest score, 1.0 for the lowest. Ties go to
/// the earlier token.
inline double saliency_rank(std::span<const double> scores, std::size_t index) {
  if (scores.empty()) throw Error(ErrorCode::input, "saliency_rank: empty score vector");
  if (index >= scores.size()) {
    throw Error(ErrorCode::input, "saliency_rank: index " + std::to_string(index) + " out of bounds for " +
                                      std::to_string(scores.size()) + " tokens");
  }
  const double v = scores[index];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > v || (scores[j] == v && j < index)) ++rank;
  }
  return static_cast<double>(rank) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Lexicons

/// Case-insensitive term -> value table.
class Lexicon {
 public:
  [[nodiscard]] double lookup(std::string_view term) const {
    const auto it = values_.find(text::lower(term));
    return it == values_.end() ? 0.0 : it->second;
  }
  [[nodiscard]] bool contains(std::string_view term) const { return values_.count(text::lower(term)) > 0; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }

  void set(std::string_view term, double value) { values_[text::lower(term)] = value; }

 private:
  std::unordered_map<std::string, double> values_;
};

namespace detail {

inline std::vector<std::pair<std::string, double>> read_tsv_values(std::istream& in, std::string_view what) {
  std::vector<std::pair<std::string, double>> rows;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(ErrorCode::input, std::string(what) + " line " + std::to_string(line_no) + ": expected term<TAB>value");
    }
    const std::string term = line.substr(0, tab);
    const std::string value_text = text::trim(std::string_view(line).substr(tab + 1));
    std::size_t consumed = 0;
    double value = 0.0;
    try {
      value = std::stod(value_text, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed == 0 || consumed != value_text.size() || !std::isfinite(value)) {
      throw Error(ErrorCode::input, std::string(what) + " line " + std::to_string(line_no) + ": non-numeric value '" +
                                        value_text + "'");
    }
    if (!seen.insert(text::lower(term)).second) {
      warn(std::string(what) + " line " + std::to_string(line_no) + ": duplicate term '" + term + "', last one wins");
    }
    rows.emplace_back(term, value);
  }
  return rows;
}

}  // namespace detail

/// Reads term<TAB>count lines and normalizes by the maximum value.
inline Lexicon load_frequency_table(std::istream& in) {
  auto rows = detail::read_tsv_values(in, "frequency table");
  // Duplicates: the last value per term wins, before normalization.
  std::unordered_map<std::string, double> last;
  for (const auto& [term, value] : rows) last[text::lower(term)] = value;
  double max_value = 0.0;
  for (const auto& [term, value] : last) max_value = std::max(max_value, value);
  Lexicon lex;
  for (const auto& [term, value] : rows) {
    lex.set(term, max_value > 0.0 ? std::max(0.0, last[text::lower(term)]) / max_value : 0.0);
  }
  return lex;
}

/// Reads term<TAB>polarity lines; polarities are clamped to [-1, 1].
inline Lexicon load_sentiment_lexicon(std::istream& in) {
  Lexicon lex;
  for (const auto& [term, value] : detail::read_tsv_values(in, "sentiment lexicon")) {
    lex.set(term, std::clamp(value, -1.0, 1.0));
  }
  return lex;
}

struct Lexicons {
  Lexicon frequency;
  Lexicon sentiment;
};

// ---------------------------------------------------------------------------
// Feature extraction

inline void validate_alignment(const Sentence& sentence, const SaliencyMap& map) {
  if (sentence.tokens.empty()) throw Error(ErrorCode::input, "sentence '" + sentence.id + "' has no tokens");
  if (map.scores.size() != sentence.tokens.size()) {
    throw Error(ErrorCode::input, "saliency map for '" + sentence.id + "' has " + std::to_string(map.scores.size()) +
                                      " scores but the sentence has " + std::to_string(sentence.tokens.size()) +
                                      " tokens");
  }
  for (std::size_t i = 0; i < map.scores.size(); ++i) {
    const double s = map.scores[i];
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw Error(ErrorCode::input, "saliency score " + std::to_string(i) + " of '" + sentence.id +
                                        "' outside [0, 1]");
    }
  }
}

/// Word frequency is looked up by surface form; polarity by lemma (surface
/// when no lemma is annotated). Both lookups are case-insensitive.
inline std::vector<TokenContext> extract(const Sentence& sentence, const SaliencyMap& map, double display_index,
                                         const Lexicons& lexicons, Condition condition = Condition::saliency,
                                         CapitalizationOptions caps = {}) {
  validate_alignment(sentence, map);
  const std::size_t l = sentence.tokens.size();
  std::vector<TokenContext> out(l);
  for (std::size_t i = 0; i < l; ++i) {
    const Token& tok = sentence.tokens[i];
    TokenContext& x = out[i];
    const std::string lemma = tok.lemma ? *tok.lemma : text::lower(tok.surface);
    x.saliency = map.scores[i];
    x.word_length = static_cast<double>(text::length(tok.surface));
    x.word_frequency = lexicons.frequency.lookup(tok.surface);
    x.sentence_length = static_cast<double>(l);
    x.display_index = display_index;
    x.sentiment_polarity = lexicons.sentiment.lookup(lemma);
    x.saliency_rank = saliency_rank(map.scores, i);
    x.word_position = static_cast<double>(i + 1);
    x.capitalization = capitalization_class(tok.surface, caps);
    x.dependency_relation = tok.deprel ? *tok.deprel : "unknown";
    x.condition = condition;
  }
  return out;
}

// ---------------------------------------------------------------------------
// CoNLL-U

struct ConlluOptions {
  /// Flag sentences with repeated words and token-count outliers.
  bool flag_filters = true;
};

inline std::vector<Sentence> ingest_conllu(std::istream& in, ConlluOptions options = {}) {
  std::vector<Sentence> sentences;
  Sentence current;
  std::optional<std::string> pending_id;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&]() {
    if (current.tokens.empty()) return;
    current.id = pending_id ? *pending_id : "s" + std::to_string(sentences.size() + 1);
    sentences.push_back(std::move(current));
    current = Sentence{};
    pending_id.reset();
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') {
      const std::string body = text::trim(std::string_view(line).substr(1));
      if (body.rfind("sent_id", 0) == 0) {
        const auto eq = body.find('=');
        if (eq != std::string::npos) pending_id = text::trim(std::string_view(body).substr(eq + 1));
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 10) {
      throw Error(ErrorCode::input, "CoNLL-U line " + std::to_string(line_no) + ": expected 10 tab-separated fields, got " +
                                        std::to_string(fields.size()));
    }
    const std::string& id = fields[0];
    if (id.find('-') != std::string::npos) {
      current.has_multiword = true;
      continue;
    }
    if (id.find('.') != std::string::npos) continue;  // empty node
    int index = 0;
    try {
      std::size_t used = 0;
      index = std::stoi(id, &used);
      if (used != id.size()) throw std::invalid_argument("id");
    } catch (const std::exception&) {
      throw Error(ErrorCode::input, "CoNLL-U line " + std::to_string(line_no) + ": malformed token id '" + id + "'");
    }
    if (index != static_cast<int>(current.tokens.size()) + 1) {
      throw Error(ErrorCode::input, "CoNLL-U line " + std::to_string(line_no) + ": token ids must be contiguous from 1");
    }
    Token tok;
    tok.surface = fields[1];
    if (fields[2] != "_") tok.lemma = fields[2];
    if (fields[6] != "_") {
      try {
        tok.head = std::stoi(fields[6]);
      } catch (const std::exception&) {
        throw Error(ErrorCode::input, "CoNLL-U line " + std::to_string(line_no) + ": malformed head '" + fields[6] + "'");
      }
    }
    if (fields[7] != "_") tok.deprel = fields[7];
    current.tokens.push_back(std::move(tok));
  }
  flush();

  if (options.flag_filters && !sentences.empty()) {
    double mean = 0.0;
    for (const auto& s : sentences) mean += static_cast<double>(s.size());
    mean /= static_cast<double>(sentences.size());
    double var = 0.0;
    for (const auto& s : sentences) var += (s.size() - mean) * (s.size() - mean);
    const double sd = std::sqrt(var / static_cast<double>(sentences.size()));
    for (auto& s : sentences) {
      std::unordered_set<std::string> seen;
      for (const auto& t : s.tokens) {
        if (!seen.insert(text::lower(t.surface)).second) s.non_unique = true;
      }
      s.length_outlier = static_cast<double>(s.size()) > mean + sd;
    }
  }
  return sentences;
}

// ---------------------------------------------------------------------------
// JSON documents: {id, tokens: [{surface, lemma?, deprel?}], scores: [...]}

inline Sentence sentence_from_json(const nlohmann::json& j) {
  Sentence s;
  s.id = j.at("id").get<std::string>();
  if (j.contains("language")) s.language = j.at("language").get<std::string>();
  for (const auto& t : j.at("tokens")) {
    Token tok;
    if (t.is_string()) {
      tok.surface = t.get<std::string>();
    } else {
      tok.surface = t.at("surface").get<std::string>();
      if (t.contains("lemma") && !t["lemma"].is_null()) tok.lemma = t["lemma"].get<std::string>();
      if (t.contains("deprel") && !t["deprel"].is_null()) tok.deprel = t["deprel"].get<std::string>();
      if (t.contains("head") && !t["head"].is_null()) tok.head = t["head"].get<int>();
    }
    s.tokens.push_back(std::move(tok));
  }
  if (s.tokens.empty()) throw Error(ErrorCode::input, "sentence '" + s.id + "' has no tokens");
  return s;
}

inline nlohmann::json to_json(const Sentence& s) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& t : s.tokens) {
    nlohmann::json jt = {{"surface", t.surface}};
    if (t.lemma) jt["lemma"] = *t.lemma;
    if (t.deprel) jt["deprel"] = *t.deprel;
    if (t.head) jt["head"] = *t.head;
    tokens.push_back(std::move(jt));
  }
  return {{"id", s.id}, {"language", s.language}, {"tokens", std::move(tokens)}};
}

struct AnnotatedSentence {
  Sentence sentence;
  SaliencyMap map;
};

inline AnnotatedSentence annotated_from_json(const nlohmann::json& j) {
  AnnotatedSentence a;
  a.sentence = sentence_from_json(j);
  a.map.sentence_id = a.sentence.id;
  a.map.scores = j.at("scores").get<std::vector<double>>();
  validate_alignment(a.sentence, a.map);
  return a;
}

inline nlohmann::json to_json(const AnnotatedSentence& a) {
  nlohmann::json j = to_json(a.sentence);
  j["scores"] = a.map.scores;
  return j;
}

inline nlohmann::json to_json(const TokenContext& x) {
  return {{"saliency", x.saliency},
          {"word_length", x.word_length},
          {"word_frequency", x.word_frequency},
          {"sentence_length", x.sentence_length},
          {"display_index", x.display_index},
          {"sentiment_polarity", x.sentiment_polarity},
          {"saliency_rank", x.saliency_rank},
          {"word_position", x.word_position},
          {"capitalization", to_string(x.capitalization)},
          {"dependency_relation", x.dependency_relation},
          {"condition", to_string(x.condition)}};
}

inline TokenContext token_context_from_json(const nlohmann::json& j) {
  TokenContext x;
  for (Covariate c : kAllCovariates) {
    const std::string key(to_string(c));
    if (!j.contains(key)) continue;
    if (is_numeric(c)) {
      set_numeric(x, c, j.at(key).get<double>());
    } else {
      set_categorical(x, c, j.at(key).get<std::string>());
    }
  }
  return x;
}

}  // namespace salperc
