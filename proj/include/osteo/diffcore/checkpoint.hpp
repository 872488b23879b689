#pragma once

#include <filesystem>

#include "osteo/diffcore/params.hpp"

namespace osteo::diffcore {

// Checkpoint layout:
//   8 bytes   magic "OSTCKPT1"
//   8 bytes   manifest length L (uint64, little-endian)
//   L bytes   JSON manifest: [{"name": ..., "shape": [...]}, ...]
//   then      each tensor's values as little-endian float64, in manifest order

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);

/// Loads into an existing ParamSet; names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, ParamSet& params);

}  // namespace osteo::diffcore
