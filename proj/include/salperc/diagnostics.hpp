#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

namespace salperc {

/// Machine-readable error categories, surfaced by the CLI on stderr.
enum class ErrorCode {
  config,      ///< invalid configuration or hyperparameters
  input,       ///< malformed or misaligned input data
  numeric,     ///< non-finite values or failed factorizations
  not_found,   ///< unknown term, study, session, ...
  conflict,    ///< duplicate session or submission
  validation,  ///< request field out of range
  exhausted,   ///< study plan has no free participant slot
  io,          ///< file system failures
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::config: return "config";
    case ErrorCode::input: return "input";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::validation: return "validation";
    case ErrorCode::exhausted: return "exhausted";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Process-wide warning sink. Defaults to stderr; tests and the CLI swap it.
class Warnings {
 public:
  using Handler = std::function<void(std::string_view)>;

  static void set_handler(Handler handler) {
    std::lock_guard lock(mutex());
    handler_ref() = std::move(handler);
  }

  static void emit(std::string_view message) {
    std::lock_guard lock(mutex());
    if (handler_ref()) {
      handler_ref()(message);
    } else {
      std::cerr << "warning: " << message << '\n';
    }
  }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  static Handler& handler_ref() {
    static Handler h;
    return h;
  }
};

inline void warn(std::string_view message) { Warnings::emit(message); }

/// Emits a warning only the first time `key` is seen in this process.
inline void warn_once(const std::string& key, std::string_view message) {
  static std::mutex m;
  static std::set<std::string> seen;
  {
    std::lock_guard lock(m);
    if (!seen.insert(key).second) return;
  }
  Warnings::emit(message);
}

}  // namespace salperc
