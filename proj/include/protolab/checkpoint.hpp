#pragma once

// Checkpoint archive: "PLCK", uint32 version, uint64 descriptor length, the
// JSON descriptor (config, array shapes, class assignment, provenance), then
// every parameter array as little-endian float32 in descriptor order,
// column-major.

#include <filesystem>
#include <string>

#include "protolab/training.hpp"

namespace protolab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Model& m);
Model deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace protolab
