#pragma once

// Prototype substitution (re-projecting prototypes onto attacker-chosen data)
// and backdoor fine-tuning with trigger insertion and label flipping.

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/data.hpp"
#include "protolab/losses.hpp"
#include "protolab/projection.hpp"
#include "protolab/training.hpp"

namespace protolab {

struct TriggerPatch {
  std::string name;
  int channels = 3;
  int height = 0;
  int width = 0;
  Matrix<float> pixels;  // [channels*height x width] in [0,1]

  float at(int c, int r, int col) const { return pixels(c * height + r, col); }
};

enum class Corner { top_left, top_right, bottom_left, bottom_right };

std::string to_string(Corner c);
Corner corner_from_string(const std::string& s);
inline constexpr std::array<Corner, 4> kAllCorners{Corner::top_left, Corner::top_right, Corner::bottom_left, Corner::bottom_right};

// Built-in 8x8 patterns: checkerboard, stripes, square, cross.
TriggerPatch builtin_trigger(const std::string& name, int channels = 3, int size = 8);
std::vector<std::string> builtin_trigger_names();

// Pixel rectangle a trigger occupies when placed at `corner`.
Rect trigger_rect(const TriggerPatch& t, Corner corner, int height, int width);

// Overwrites the corner-aligned region with the trigger; other pixels and the label are untouched.
ImageSample apply_trigger(const ImageSample& x, const TriggerPatch& t, Corner corner);

int flip_label(int y);

struct PoisonConfig {
  std::vector<TriggerPatch> triggers;
  std::vector<Corner> corners;
  double ratio = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Four built-in triggers at any of the four corners, whole dataset poisoned.
PoisonConfig default_poison_config(std::uint64_t seed);

struct TriggerSet {
  Dataset data;                  // triggered copies with flipped labels
  std::vector<int> source;       // index of the clean original
  std::vector<int> trigger;      // index into PoisonConfig::triggers
  std::vector<Corner> corner;
};

// Per-sample (trigger, corner) choice; depends only on (seed, index).
std::pair<int, Corner> trigger_choice(const PoisonConfig& cfg, std::size_t index);

// floor(ratio*n) samples chosen by seeded uniform selection, each triggered and label-flipped.
TriggerSet poison_dataset(const Dataset& d, const PoisonConfig& cfg);

// Each sample gets a seeded uniform label in {0..C-1}.
Dataset assign_random_labels(const Dataset& d, int num_classes, std::uint64_t seed);

template <typename Scalar>
double approximation_error(const PrototypeBank<Scalar>& before, const PrototypeBank<Scalar>& after) {
  if (before.tokens.rows() != after.tokens.rows() || before.tokens.cols() != after.tokens.cols())
    throw DomainError("approximation_error: bank shapes differ");
  return static_cast<double>((before.tokens - after.tokens).norm());
}

template <typename Scalar>
struct SubstitutionResult {
  ModelParams<Scalar> model;
  double approx_error = 0;
  std::vector<int> substituted;  // prototype indices that were replaced
};

// Replaces the listed prototypes by their most similar parts in `ood`,
// ignoring class assignments. Encoder and head are untouched.
template <typename Scalar>
SubstitutionResult<Scalar> substitute_subset(const ModelParams<Scalar>& theta, const Dataset& ood, std::vector<int> which) {
  if (theta.variant() != Variant::protovit) throw ConfigError("prototype substitution requires the protovit variant");
  if (ood.empty()) throw DataError("substitution set is empty");
  std::sort(which.begin(), which.end());
  SubstitutionResult<Scalar> out{theta, 0.0, which};
  if (which.empty()) return out;
  const auto best = best_matches<Scalar>(theta, ood, which, [](int, const ImageSample&) { return true; });
  for (std::size_t k = 0; k < which.size(); ++k) {
    const int i = which[k];
    out.model.bank.prototype(i) = best[k].tokens;
    out.model.bank.provenance[static_cast<std::size_t>(i)] =
        ProvenanceRecord{ood.samples[static_cast<std::size_t>(best[k].sample)].id, best[k].sample, best[k].patches};
  }
  out.approx_error = approximation_error(theta.bank, out.model.bank);
  return out;
}

template <typename Scalar>
SubstitutionResult<Scalar> substitute_prototypes(const ModelParams<Scalar>& theta, const Dataset& ood) {
  std::vector<int> all(static_cast<std::size_t>(theta.bank.size()));
  std::iota(all.begin(), all.end(), 0);
  return substitute_subset(theta, ood, all);
}

// Seeded uniform subset of floor(fraction * d_p) prototypes.
std::vector<int> choose_prototypes(int num_prototypes, double fraction, std::uint64_t seed);

template <typename Scalar>
SubstitutionResult<Scalar> partial_substitution(const ModelParams<Scalar>& theta, const Dataset& ood, double fraction,
                                                std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("substitution fraction must lie in [0,1]");
  return substitute_subset(theta, ood, choose_prototypes(theta.bank.size(), fraction, seed));
}

struct AttackState {
  Model ref;
  Model attacked;
  TrainLog log;
};

struct BackdoorOptions {
  int epochs = 3;
  int batch_size = 32;
  double lr = 1e-3;       // encoder and prototypes
  double lr_head = 1e-2;  // class head
  bool cosine = false;    // cosine-anneal both rates over all steps
  std::uint64_t seed = 0;
};

// Backdoor fine-tuning of a trained PIP-Net model. The reference model stays
// frozen and is checked bit-exact at exit.
AttackState backdoor_finetune(const Model& theta, const Dataset& train, const PoisonConfig& cfg, const LossWeights& w,
                              const BackdoorOptions& opts);

void to_json(nlohmann::json& j, const PoisonConfig& c);
void from_json(const nlohmann::json& j, PoisonConfig& c);
void to_json(nlohmann::json& j, const BackdoorOptions& o);
void from_json(const nlohmann::json& j, BackdoorOptions& o);

}  // namespace protolab
