#pragma once

#include <filesystem>
#include <string_view>

namespace radvit::log {

enum class Level { debug, info, warning, error };

/// Emit one event record. Records go to stderr (info and above) and, when a
/// run log is open, to that file as one JSON object per line with an ISO-8601
/// UTC timestamp.
void event(Level level, std::string_view message);

inline void info(std::string_view m) { event(Level::info, m); }
inline void warning(std::string_view m) { event(Level::warning, m); }
inline void error(std::string_view m) { event(Level::error, m); }

void open_run_log(const std::filesystem::path& path);
void close_run_log();
void set_quiet(bool quiet);

std::string iso_timestamp();

}  // namespace radvit::log
