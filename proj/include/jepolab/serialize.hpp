#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "jepolab/policy.hpp"
#include "jepolab/tasks.hpp"

namespace jepolab {

// Doubles cross the file boundary as C hexfloat strings ("%a"), which
// round-trip bit-exactly and stay self-describing in the JSON documents.
std::string encode_double(double x);
double decode_double(const std::string& s);

// Fixed decimal formatting for metrics files: shortest-17-digit, "nan"/"-inf"
// spelled out. Deterministic across runs.
std::string format_metric(double x);

// Write via temp file + rename so readers never observe a truncated file.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

nlohmann::json policy_to_json(const PolicyParams& params);
PolicyParams policy_from_json(const nlohmann::json& doc);
void save_policy(const std::filesystem::path& path, const PolicyParams& params);
PolicyParams load_policy(const std::filesystem::path& path);

nlohmann::json task_to_json(const TaskSpec& task);
TaskSpec task_from_json(const nlohmann::json& doc);
void save_task(const std::filesystem::path& path, const TaskSpec& task);
TaskSpec load_task(const std::filesystem::path& path);

}  // namespace jepolab
