#pragma once

#include "voxelforge/config.hpp"
#include "voxelforge/metrics.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace voxelforge {

/// *.segv files of a directory keyed by filename stem.
std::map<std::string, std::filesystem::path> list_cases(const std::filesystem::path& dir);

/// Pairs two case listings by stem; throws ConfigError naming every stem
/// present on one side only.
std::vector<std::pair<std::filesystem::path, std::filesystem::path>> pair_cases(
    const std::map<std::string, std::filesystem::path>& a, const std::map<std::string, std::filesystem::path>& b,
    const std::string& a_name, const std::string& b_name);

/// Runs fn(0..n-1) on up to `jobs` threads. The exception of the lowest
/// failing index is rethrown after all workers finish.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Every command writes <output_dir>/<command>_manifest.json whose first
// section is the resolved config.
void cmd_phantom(const RunConfig& cfg);
void cmd_preprocess(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_infer(const RunConfig& cfg);
void cmd_merge(const RunConfig& cfg);
MetricReport cmd_evaluate(const RunConfig& cfg);

/// Dispatches by command name after validating the config for it.
void run_command(const std::string& command, const RunConfig& cfg);

}  // namespace voxelforge
