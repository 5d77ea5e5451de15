#pragma once

#include <spdlog/spdlog.h>

namespace voxelforge {

// Applies VOXELFORGE_LOG (error|info|debug) to the default spdlog logger.
// Unknown values fall back to info.
void configure_logging();

}  // namespace voxelforge
