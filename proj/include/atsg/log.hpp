#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>

namespace atsg {

enum class LogLevel { info, warning };

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {

struct LogState {
  std::mutex mutex;
  LogSink sink;
};

inline LogState& log_state() {
  static LogState state;
  return state;
}

}  // namespace detail

/// Replaces the process-wide log sink; an empty sink restores stderr output.
/// Returns the previous sink.
inline LogSink set_log_sink(LogSink sink) {
  auto& st = detail::log_state();
  std::lock_guard lock(st.mutex);
  return std::exchange(st.sink, std::move(sink));
}

inline void log_message(LogLevel level, std::string_view message) {
  auto& st = detail::log_state();
  std::lock_guard lock(st.mutex);
  if (st.sink) {
    st.sink(level, message);
    return;
  }
  std::cerr << (level == LogLevel::warning ? "warning: " : "") << message << '\n';
}

inline void log_info(std::string_view message) { log_message(LogLevel::info, message); }
inline void log_warning(std::string_view message) { log_message(LogLevel::warning, message); }

}  // namespace atsg
