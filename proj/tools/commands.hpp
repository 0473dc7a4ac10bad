#pragma once

// Pipeline commands behind the proto-lab CLI. Each command reads a JSON run
// config, writes its artifacts into an output directory and lists them in
// manifest.json.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/analysis.hpp"
#include "protolab/attacks.hpp"
#include "protolab/checkpoint.hpp"
#include "protolab/eval.hpp"
#include "protolab/training.hpp"

namespace protolab::cli {

inline const std::vector<std::string> kCommands{"train", "attack-substitute", "attack-backdoor", "evaluate", "analyze", "sweep-fraction"};

std::string usage();

// Resolves dataset sources. A source is {"synthetic": SyntheticSpec},
// {"folder": path, "image_size": n} or absent (synthetic default).
Dataset load_split(const nlohmann::json& cfg, const std::string& split, std::uint64_t seed);

// Loads cfg["checkpoint"] when present, otherwise trains from cfg["train"].
Model obtain_model(const nlohmann::json& cfg, std::uint64_t seed, const std::filesystem::path& out, nlohmann::json& manifest);

// Runs one command. Throws protolab::Error on invalid input.
void run_command(const std::string& command, nlohmann::json cfg, const std::filesystem::path& out);

// Worker count from PROTOLAB_WORKERS (default 1).
int worker_count();

}  // namespace protolab::cli
