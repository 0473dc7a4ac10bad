#pragma once

// Stage-structured training. Each stage names the learning rate of every
// parameter group it trains; groups without a rate are frozen and left
// bit-exact.

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/data.hpp"
#include "protolab/losses.hpp"
#include "protolab/model.hpp"
#include "protolab/optim.hpp"
#include "protolab/projection.hpp"

namespace protolab {

using Model = ModelParams<float>;

struct StageConfig {
  std::string name;
  // "train", "project" (prototype projection, no epochs) or "slots_pruning" (no-op hook)
  std::string kind = "train";
  int epochs = 0;
  std::map<ParamGroup, double> lr;    // absent group = frozen
  std::optional<LossWeights> weights;  // pipnet only; defaults to the config profile
  bool cosine = false;

  double rate(ParamGroup g) const {
    auto it = lr.find(g);
    return it == lr.end() ? 0.0 : it->second;
  }
};

struct TrainConfig {
  ModelConfig model;
  std::vector<StageConfig> stages;
  int batch_size = 16;
  std::uint64_t seed = 0;
  std::string loss_profile = "train";
  std::optional<AugmentationPolicy> augmentation;  // defaults to the variant's family
  AdamWConfig optimizer;

  void validate() const;
};

TrainConfig default_pipnet_config(std::uint64_t seed);
TrainConfig default_protovit_config(std::uint64_t seed);
TrainConfig default_cbm_config(std::uint64_t seed);
TrainConfig default_train_config(Variant v, std::uint64_t seed);

struct EpochRecord {
  std::string stage;
  int epoch = 0;        // global, strictly increasing
  int stage_epoch = 0;  // within the stage
  double loss = 0;
  std::map<std::string, double> terms;
  double accuracy = 0;  // on the un-augmented training set after the epoch
  double wall_seconds = 0;
};

struct TrainLog {
  std::vector<EpochRecord> records;
  std::vector<std::pair<std::string, int>> stage_starts;  // (stage, first global epoch)

  int next_epoch() const { return records.empty() ? 0 : records.back().epoch + 1; }
  std::string to_jsonl() const;
  static TrainLog from_jsonl(const std::string& text);
};

struct TrainResult {
  Model model;
  TrainLog log;
};

TrainResult train_pipnet(const Dataset& train, const TrainConfig& cfg);
TrainResult train_protovit(const Dataset& train, const TrainConfig& cfg);
TrainResult train_cbm(const Dataset& train, const TrainConfig& cfg);
TrainResult train_model(const Dataset& train, const TrainConfig& cfg);

// Only the head trains; encoder and prototypes stay bit-exact.
TrainResult finetune_last_layer(const Model& theta, const Dataset& d, int epochs, double lr, int batch_size, std::uint64_t seed);

// Runs one training stage in place, appending to `log`. The batch loss is built
// by `loss(tape, vars, batch_indices, epoch)`.
using BatchLossFn = std::function<LossGraph<float>(Tape<float>&, const ModelVars<float>&, std::span<const int>, int)>;
void run_stage(Model& model, const StageConfig& stage, const Dataset& d, int batch_size, std::uint64_t seed,
               const AdamWConfig& opt, const BatchLossFn& loss, TrainLog& log);

// Replaces every prototype by the matched latent patches of the sample in `d`
// maximizing its summed cosine similarity. With a class assignment, only
// samples of that class are candidates.
template <typename Scalar>
ModelParams<Scalar> project_prototypes(const ModelParams<Scalar>& theta, const Dataset& d) {
  if (theta.variant() != Variant::protovit) throw ConfigError("prototype projection requires the protovit variant");
  const int dp = theta.bank.size();
  const auto& assignment = theta.bank.class_assignment;
  if (assignment) {
    for (int i = 0; i < dp; ++i) {
      const int c = (*assignment)[static_cast<std::size_t>(i)];
      const bool any = std::any_of(d.samples.begin(), d.samples.end(), [c](const ImageSample& x) { return x.label == c; });
      if (!any) throw ProjectionError("no projection samples for class " + std::to_string(c));
    }
  } else if (d.empty()) {
    throw ProjectionError("projection set is empty");
  }
  std::vector<int> all(static_cast<std::size_t>(dp));
  std::iota(all.begin(), all.end(), 0);
  const auto best = best_matches<Scalar>(theta, d, all, [&](int i, const ImageSample& x) {
    return !assignment || x.label == (*assignment)[static_cast<std::size_t>(i)];
  });
  ModelParams<Scalar> out = theta;
  for (int i = 0; i < dp; ++i) {
    const auto& b = best[static_cast<std::size_t>(i)];
    out.bank.prototype(i) = b.tokens;
    out.bank.provenance[static_cast<std::size_t>(i)] =
        ProvenanceRecord{d.samples[static_cast<std::size_t>(b.sample)].id, b.sample, b.patches};
  }
  return out;
}

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const StageConfig& s);
void from_json(const nlohmann::json& j, StageConfig& s);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

}  // namespace protolab
