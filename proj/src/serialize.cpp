#include "protolab/serialize.hpp"

namespace protolab {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", to_string(c.variant)},
       {"channels", c.channels},
       {"image_size", c.image_size},
       {"patch_size", c.patch_size},
       {"embed_dim", c.embed_dim},
       {"depth", c.depth},
       {"num_prototypes", c.num_prototypes},
       {"token_count", c.token_count},
       {"num_classes", c.num_classes},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.channels = j.value("channels", c.channels);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.num_prototypes = j.value("num_prototypes", c.num_prototypes);
  c.token_count = j.value("token_count", c.token_count);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const ProvenanceRecord& r) {
  j = {{"sample_id", r.sample_id}, {"sample_index", r.sample_index}, {"patch_indices", r.patch_indices}};
}

void from_json(const nlohmann::json& j, ProvenanceRecord& r) {
  r.sample_id = j.at("sample_id").get<std::string>();
  r.sample_index = j.at("sample_index").get<int>();
  r.patch_indices = j.at("patch_indices").get<std::vector<int>>();
}

ParamGroup param_group_from_string(const std::string& s) {
  if (s == "backbone") return ParamGroup::backbone;
  if (s == "neck") return ParamGroup::neck;
  if (s == "prototypes") return ParamGroup::prototypes;
  if (s == "head") return ParamGroup::head;
  throw ConfigError("unknown parameter group '" + s + "'");
}

}  // namespace protolab
