#pragma once

// Global analysis (nearest training patches per prototype), local analysis
// (prototypes ranked for one input), heatmap bounding boxes and PNG rendering.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/attacks.hpp"
#include "protolab/training.hpp"

namespace protolab {

struct PatchMatch {
  double score = 0;
  int sample_index = -1;
  std::string sample_id;
  std::vector<int> patches;
  std::vector<Rect> rects;  // pixel rectangle of each patch
};

struct GlobalEntry {
  int prototype = 0;
  std::vector<PatchMatch> matches;  // scores non-increasing
};

struct LocalEntry {
  int prototype = 0;
  double contribution = 0;  // p_i * head[i, predicted]
  double similarity = 0;    // p_i
  std::vector<int> patches;
  std::vector<Rect> rects;
};

struct LocalAnalysis {
  std::string sample_id;
  int prediction = 0;
  double class_score = 0;  // head output for the predicted class (pre-softmax for protovit)
  std::vector<LocalEntry> by_contribution;
  std::vector<LocalEntry> by_similarity;
  Rect bbox;  // heatmap box of the top contributing prototype
};

struct AnalysisArtifact {
  std::string kind;  // "global" or "local"
  int image_size = 0;
  std::vector<GlobalEntry> global;
  std::vector<LocalAnalysis> local;
  std::vector<std::string> images;  // rendered files, relative to the artifact
};

// For every prototype, the k best-matching patches over d. PIP-Net candidates
// are single patches scored by their per-patch activation; ProtoViT candidates
// are one greedy-matched patch set per sample. Ties keep the lower sample,
// then the lower patch.
AnalysisArtifact global_analysis(const Model& theta, const Dataset& d, int k);

// Top-k prototypes for x by contribution and by similarity.
LocalAnalysis local_analysis(const Model& theta, const ImageSample& x, int k, double bbox_threshold = 0.5);

// Per-patch similarity map of prototype i on x: [grid x grid].
Matrix<double> similarity_map(const Model& theta, const ImageSample& x, int prototype);

// Tight rectangle around every patch whose value is >= threshold * max.
Rect heatmap_to_bbox(const Matrix<double>& map, double threshold, int patch_size);

// Pixels of `r` that belong to a complete copy of one of the configured
// triggers at one of its corners in x.
int trigger_pixels_in(const ImageSample& x, const Rect& r, const PoisonConfig& cfg);

// Sum of trigger_pixels_in over every rendered patch of a global artifact.
int trigger_pixels_rendered(const AnalysisArtifact& a, const Dataset& d, const PoisonConfig& cfg);

// Renders the global grid (rows = prototypes, columns = matches) or the local
// overlays next to `json_path` and records the file names in the artifact.
void render_global(AnalysisArtifact& a, const Dataset& d, const std::filesystem::path& png_path, int scale = 4);
void render_local(const LocalAnalysis& l, const ImageSample& x, const std::filesystem::path& png_path, int top = 3, int scale = 4);

void to_json(nlohmann::json& j, const Rect& r);
void from_json(const nlohmann::json& j, Rect& r);
void to_json(nlohmann::json& j, const AnalysisArtifact& a);
void from_json(const nlohmann::json& j, AnalysisArtifact& a);

}  // namespace protolab
