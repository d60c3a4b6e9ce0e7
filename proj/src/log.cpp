#include "radvit/log.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>

#include <nlohmann/json.hpp>

namespace radvit::log {
namespace {

struct Sink {
  std::mutex mu;
  std::ofstream file;
  bool quiet = false;
};

Sink& sink() {
  static Sink s;
  return s;
}

const char* level_name(Level level) {
  switch (level) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warning: return "warning";
    case Level::error: return "error";
  }
  return "info";
}

}  // namespace

std::string iso_timestamp() {
  using namespace std::chrono;
  const auto now = system_clock::now();
  const auto secs = system_clock::to_time_t(now);
  const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

void event(Level level, std::string_view message) {
  auto& s = sink();
  std::lock_guard lock(s.mu);
  if ((!s.quiet || level == Level::error) && level != Level::debug) {
    std::cerr << "[" << level_name(level) << "] " << message << '\n';
  }
  if (s.file.is_open()) {
    nlohmann::json rec{{"ts", iso_timestamp()}, {"level", level_name(level)}, {"msg", message}};
    s.file << rec.dump() << '\n';
    s.file.flush();
  }
}

void open_run_log(const std::filesystem::path& path) {
  auto& s = sink();
  std::lock_guard lock(s.mu);
  if (s.file.is_open()) s.file.close();
  s.file.open(path, std::ios::app);
}

void close_run_log() {
  auto& s = sink();
  std::lock_guard lock(s.mu);
  if (s.file.is_open()) s.file.close();
}

void set_quiet(bool quiet) {
  auto& s = sink();
  std::lock_guard lock(s.mu);
  s.quiet = quiet;
}

}  // namespace radvit::log
