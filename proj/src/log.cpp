#include "voxelforge/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <string_view>

namespace voxelforge {

void configure_logging() {
    auto logger = spdlog::get("voxelforge");
    if (!logger) logger = spdlog::stderr_color_mt("voxelforge");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");

    const char* env = std::getenv("VOXELFORGE_LOG");
    std::string_view level = env ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        spdlog::set_level(spdlog::level::info);
    }
}

}  // namespace voxelforge
