#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/types.hpp"

namespace protolab {

// Label used for samples whose label has been stripped.
inline constexpr int kNoLabel = -1;

struct Dataset {
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  std::string split = "train";

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }

  // Throws DataError unless nonempty with consistent image dimensions.
  void validate() const;
};

struct ShapeClass {
  std::string name;
  std::string shape;  // circle, square, triangle, cross, ring, diamond
  std::array<float, 3> color_min{0.8f, 0.1f, 0.1f};
  std::array<float, 3> color_max{1.0f, 0.3f, 0.3f};
  int size_min = 5;  // half-extent in pixels
  int size_max = 8;
};

struct SyntheticSpec {
  int image_size = 32;
  int channels = 3;
  std::vector<ShapeClass> classes;
  float noise = 0.08f;       // background noise amplitude
  float background = 0.45f;  // mean background level
  int margin = 8;            // shapes keep this far from the image border
  int count_per_class = 64;
  std::uint64_t seed = 0;
  std::string split = "train";
};

// Two-class task: red circles vs yellow squares on a noisy grey background.
SyntheticSpec default_synthetic_spec(const std::string& split, int count_per_class, std::uint64_t seed);
// Triangles and crosses in arbitrary colours: the out-of-distribution pool.
SyntheticSpec default_ood_spec(int count_per_class, std::uint64_t seed);

Dataset generate_synthetic(const SyntheticSpec& spec);

// root/<classname>/*.png, lexicographic order; images resized to image_size.
Dataset load_image_folder(const std::filesystem::path& root, int image_size, const std::string& split = "train");
// Writes root/<classname>/<index>.png and root/manifest.json (paths, labels, split, checksum).
void write_image_folder(const Dataset& d, const std::filesystem::path& root);

struct AugmentationPolicy {
  bool flip = false;
  float max_rotation_deg = 0;
  int max_shift = 0;
  float shear = 0;
  float color_jitter = 0;
  std::uint64_t seed = 0;

  bool empty() const { return !flip && max_rotation_deg == 0 && max_shift == 0 && shear == 0 && color_jitter == 0; }
};

AugmentationPolicy pipnet_augmentation(std::uint64_t seed);
AugmentationPolicy protovit_augmentation(std::uint64_t seed);

// One augmentation; `key` selects the position in the policy's seed stream.
ImageSample augment(const ImageSample& x, const AugmentationPolicy& policy, std::uint64_t key);
// Two independently sampled views; deterministic in (policy.seed, key).
std::pair<ImageSample, ImageSample> two_views(const ImageSample& x, const AugmentationPolicy& policy, std::uint64_t key);

enum class LabelMode { keep, random, none };

Dataset build_projection_set(const Dataset& source, LabelMode mode, std::uint64_t seed = 0, int num_classes = 2);

// Independent generator per (seed, stream, index) so results never depend on
// iteration order.
std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL);

void to_json(nlohmann::json& j, const ShapeClass& c);
void from_json(const nlohmann::json& j, ShapeClass& c);
void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);
void to_json(nlohmann::json& j, const AugmentationPolicy& p);
void from_json(const nlohmann::json& j, AugmentationPolicy& p);

}  // namespace protolab
