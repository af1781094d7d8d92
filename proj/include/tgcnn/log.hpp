#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

namespace tgcnn {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& log_sink() {
  static LogSink sink = [](const std::string& msg) { std::clog << msg << '\n'; };
  return sink;
}

/// Replaces the warning sink; returns the previous one so callers can restore it.
inline LogSink set_log_sink(LogSink sink) { return std::exchange(log_sink(), std::move(sink)); }

inline void log_warning(const std::string& msg) {
  if (log_sink()) log_sink()("warning: " + msg);
}

inline void log_info(const std::string& msg) {
  if (log_sink()) log_sink()(msg);
}

/// RAII capture of warnings, mostly for tests.
class ScopedLogCapture {
 public:
  ScopedLogCapture() : previous_(set_log_sink([this](const std::string& m) { lines_.push_back(m); })) {}
  ~ScopedLogCapture() { set_log_sink(std::move(previous_)); }
  ScopedLogCapture(const ScopedLogCapture&) = delete;
  ScopedLogCapture& operator=(const ScopedLogCapture&) = delete;

  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::vector<std::string> lines_;
  LogSink previous_;
};

}  // namespace tgcnn
