#pragma once

#include <string>

namespace prm {

enum class LogLevel { error = 0, info = 1, debug = 2 };

/// Resolved once from the PRM_LOG environment variable
/// (error | info | debug); defaults to info.
LogLevel log_level();

void log_error(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace prm
