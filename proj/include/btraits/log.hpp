#pragma once

#include <iostream>
#include <mutex>
#include <sstream>
#include <utility>

namespace btraits::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

inline Level& threshold() {
  static Level level = Level::Info;
  return level;
}

inline void set_level(Level level) { threshold() = level; }

template <typename... Args>
void write(Level level, Args&&... args) {
  if (level < threshold()) return;
  static std::mutex mu;
  static constexpr const char* kTags[] = {"debug", "info", "warn", "error"};
  std::ostringstream ss;
  ss << "[" << kTags[static_cast<int>(level)] << "] ";
  (ss << ... << std::forward<Args>(args));
  ss << '\n';
  std::lock_guard lock(mu);
  std::cerr << ss.str();
}

template <typename... Args>
void debug(Args&&... args) { write(Level::Debug, std::forward<Args>(args)...); }
template <typename... Args>
void info(Args&&... args) { write(Level::Info, std::forward<Args>(args)...); }
template <typename... Args>
void warn(Args&&... args) { write(Level::Warn, std::forward<Args>(args)...); }
template <typename... Args>
void error(Args&&... args) { write(Level::Error, std::forward<Args>(args)...); }

}  // namespace btraits::log
