#pragma once

// Internal checkpoint helpers shared by the model save/load code.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prm/params.hpp"

namespace prm::detail {

inline constexpr int kCheckpointVersion = 1;

/// {"format_version": 1, "model": kind, "config": ..., "tensors": {...}}
/// with canonical sorted keys.
void save_checkpoint_file(const std::filesystem::path& path, const std::string& kind,
                          const nlohmann::json& config, const std::vector<ParamRef>& refs,
                          const nlohmann::json& extra = nlohmann::json::object());

/// Parses, checks version and kind, and returns the whole document.
nlohmann::json load_checkpoint_file(const std::filesystem::path& path,
                                    const std::string& kind);

/// Copies tensors out of the document into the refs; tensor sets must match
/// exactly (same names, same shapes).
void restore_tensors(const nlohmann::json& doc, const std::vector<ParamRef>& refs);

}  // namespace prm::detail
