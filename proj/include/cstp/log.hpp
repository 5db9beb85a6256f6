#pragma once

#include <atomic>
#include <cstddef>
#include <iostream>
#include <string_view>

namespace cstp::log {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

/// Number of warnings raised so far, printed or not.
inline std::atomic<std::size_t>& warning_count() {
  static std::atomic<std::size_t> count{0};
  return count;
}

inline void warn(std::string_view message) {
  ++warning_count();
  if (warnings_enabled()) std::cerr << "[cstp] warning: " << message << '\n';
}

inline void info(std::string_view message) { std::cerr << "[cstp] " << message << '\n'; }

/// Suppresses warning output for its lifetime.
class ScopedSilence {
 public:
  ScopedSilence() : previous_(warnings_enabled().exchange(false)) {}
  ~ScopedSilence() { warnings_enabled() = previous_; }
  ScopedSilence(const ScopedSilence&) = delete;
  ScopedSilence& operator=(const ScopedSilence&) = delete;

 private:
  bool previous_;
};

}  // namespace cstp::log
