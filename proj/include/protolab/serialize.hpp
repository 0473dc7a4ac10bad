#pragma once

#include <nlohmann/json.hpp>

#include "protolab/model.hpp"

namespace protolab {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const ProvenanceRecord& r);
void from_json(const nlohmann::json& j, ProvenanceRecord& r);

ParamGroup param_group_from_string(const std::string& s);

}  // namespace protolab
