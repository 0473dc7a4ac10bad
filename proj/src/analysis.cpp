#include "protolab/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "protolab/image_io.hpp"

namespace protolab {

namespace {

struct Candidate {
  double score;
  int sample;
  std::vector<int> patches;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.sample != b.sample) return a.sample < b.sample;
  return a.patches < b.patches;
}

std::vector<Rect> rects_of(const std::vector<int>& patches, const ModelConfig& cfg) {
  std::vector<Rect> out;
  for (int p : patches) out.push_back(patch_rect(p, cfg));
  return out;
}

Rect cover(const std::vector<Rect>& rs) {
  Rect r = rs.front();
  for (const auto& o : rs) {
    r.x0 = std::min(r.x0, o.x0);
    r.y0 = std::min(r.y0, o.y0);
    r.x1 = std::max(r.x1, o.x1);
    r.y1 = std::max(r.y1, o.y1);
  }
  return r;
}

// Column index of the first maximum, matching the max-pool used by the head.
int argmax_patch(const Matrix<float>& per_patch, int i) {
  int best = 0;
  for (Eigen::Index j = 1; j < per_patch.rows(); ++j)
    if (per_patch(j, i) > per_patch(best, i)) best = static_cast<int>(j);
  return best;
}

void require_prototypes(const Model& theta) {
  if (theta.variant() == Variant::cbm) throw ConfigError("prototype analysis is not defined for the cbm variant");
}

}  // namespace

AnalysisArtifact global_analysis(const Model& theta, const Dataset& d, int k) {
  require_prototypes(theta);
  if (k < 1) throw ConfigError("global_analysis: k must be >= 1");
  if (d.empty()) throw DataError("global_analysis: empty dataset");
  const int dp = theta.bank.size();
  std::vector<std::vector<Candidate>> cands(static_cast<std::size_t>(dp));
  for (std::size_t s = 0; s < d.size(); ++s) {
    const auto f = forward(d.samples[s], theta);
    for (int i = 0; i < dp; ++i) {
      auto& c = cands[static_cast<std::size_t>(i)];
      if (theta.variant() == Variant::pipnet) {
        for (Eigen::Index j = 0; j < f.per_patch.rows(); ++j)
          c.push_back({static_cast<double>(f.per_patch(j, i)), static_cast<int>(s), {static_cast<int>(j)}});
      } else {
        c.push_back({static_cast<double>(f.activations(i)), static_cast<int>(s), f.assignment.indices[static_cast<std::size_t>(i)]});
      }
    }
  }
  AnalysisArtifact a;
  a.kind = "global";
  a.image_size = theta.config.image_size;
  for (int i = 0; i < dp; ++i) {
    auto& c = cands[static_cast<std::size_t>(i)];
    const std::size_t take = std::min(c.size(), static_cast<std::size_t>(k));
    std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(take), c.end(), better);
    GlobalEntry e;
    e.prototype = i;
    for (std::size_t m = 0; m < take; ++m)
      e.matches.push_back({c[m].score, c[m].sample, d.samples[static_cast<std::size_t>(c[m].sample)].id, c[m].patches,
                           rects_of(c[m].patches, theta.config)});
    a.global.push_back(std::move(e));
  }
  return a;
}

LocalAnalysis local_analysis(const Model& theta, const ImageSample& x, int k, double bbox_threshold) {
  require_prototypes(theta);
  if (k < 1) throw ConfigError("local_analysis: k must be >= 1");
  const auto f = forward(x, theta);
  const int dp = theta.bank.size();
  LocalAnalysis l;
  l.sample_id = x.id;
  l.prediction = f.prediction;
  RowVector<float> logits = f.activations * theta.head.weights;
  l.class_score = static_cast<double>(logits(l.prediction));
  std::vector<LocalEntry> all;
  for (int i = 0; i < dp; ++i) {
    LocalEntry e;
    e.prototype = i;
    e.similarity = static_cast<double>(f.activations(i));
    e.contribution = static_cast<double>(f.activations(i)) * static_cast<double>(theta.head.weights(i, l.prediction));
    e.patches = theta.variant() == Variant::pipnet ? std::vector<int>{argmax_patch(f.per_patch, i)}
                                                   : f.assignment.indices[static_cast<std::size_t>(i)];
    e.rects = rects_of(e.patches, theta.config);
    all.push_back(std::move(e));
  }
  const std::size_t take = std::min(all.size(), static_cast<std::size_t>(k));
  auto by = [&](auto key) {
    std::vector<LocalEntry> v = all;
    std::stable_sort(v.begin(), v.end(), [&](const LocalEntry& a, const LocalEntry& b) { return key(a) > key(b); });
    v.resize(take);
    return v;
  };
  l.by_contribution = by([](const LocalEntry& e) { return e.contribution; });
  l.by_similarity = by([](const LocalEntry& e) { return e.similarity; });
  l.bbox = heatmap_to_bbox(similarity_map(theta, x, l.by_contribution.front().prototype), bbox_threshold, theta.config.patch_size);
  return l;
}

Matrix<double> similarity_map(const Model& theta, const ImageSample& x, int prototype) {
  require_prototypes(theta);
  const int g = theta.config.grid();
  Matrix<double> map(g, g);
  if (theta.variant() == Variant::pipnet) {
    const auto f = forward(x, theta);
    for (int j = 0; j < g * g; ++j) map(j / g, j % g) = f.per_patch(j, prototype);
  } else {
    const auto z = encode(x, theta);
    const Matrix<float> cos = detail::token_patch_cosines<float>(theta.bank.prototype(prototype), z.patches);
    for (int j = 0; j < g * g; ++j) map(j / g, j % g) = cos.col(j).maxCoeff();
  }
  return map;
}

Rect heatmap_to_bbox(const Matrix<double>& map, double threshold, int patch_size) {
  if (map.size() == 0) throw DomainError("heatmap_to_bbox: empty map");
  const double peak = map.maxCoeff();
  const double cut = peak > 0 ? threshold * peak : peak;
  Rect r{static_cast<int>(map.cols()), static_cast<int>(map.rows()), -1, -1};
  for (Eigen::Index row = 0; row < map.rows(); ++row)
    for (Eigen::Index col = 0; col < map.cols(); ++col)
      if (map(row, col) >= cut) {
        r.x0 = std::min(r.x0, static_cast<int>(col));
        r.y0 = std::min(r.y0, static_cast<int>(row));
        r.x1 = std::max(r.x1, static_cast<int>(col) + 1);
        r.y1 = std::max(r.y1, static_cast<int>(row) + 1);
      }
  return Rect{r.x0 * patch_size, r.y0 * patch_size, r.x1 * patch_size, r.y1 * patch_size};
}

int trigger_pixels_in(const ImageSample& x, const Rect& r, const PoisonConfig& cfg) {
  std::vector<char> hit(static_cast<std::size_t>(x.height) * x.width, 0);
  for (const auto& t : cfg.triggers) {
    if (t.height == 0 || t.width == 0 || t.channels != x.channels || t.height >= x.height || t.width >= x.width) continue;
    for (Corner corner : cfg.corners) {
      const Rect tr = trigger_rect(t, corner, x.height, x.width);
      if (!tr.overlaps(r)) continue;
      bool present = true;
      for (int ch = 0; ch < x.channels && present; ++ch)
        for (int dy = 0; dy < t.height && present; ++dy)
          for (int dx = 0; dx < t.width && present; ++dx) present = x.at(ch, tr.y0 + dy, tr.x0 + dx) == t.at(ch, dy, dx);
      if (!present) continue;
      for (int y = std::max(tr.y0, r.y0); y < std::min(tr.y1, r.y1); ++y)
        for (int xx = std::max(tr.x0, r.x0); xx < std::min(tr.x1, r.x1); ++xx) hit[static_cast<std::size_t>(y) * x.width + xx] = 1;
    }
  }
  return static_cast<int>(std::count(hit.begin(), hit.end(), 1));
}

int trigger_pixels_rendered(const AnalysisArtifact& a, const Dataset& d, const PoisonConfig& cfg) {
  int total = 0;
  for (const auto& e : a.global)
    for (const auto& m : e.matches)
      for (const auto& r : m.rects) total += trigger_pixels_in(d.samples.at(static_cast<std::size_t>(m.sample_index)), r, cfg);
  return total;
}

void render_global(AnalysisArtifact& a, const Dataset& d, const std::filesystem::path& png_path, int scale) {
  if (a.global.empty()) throw DomainError("render_global: nothing to render");
  const ImageSample& any = d.samples.at(0);
  std::size_t cols = 0;
  for (const auto& e : a.global) cols = std::max(cols, e.matches.size());
  const int patch = a.global.front().matches.empty() ? 8 : a.global.front().matches.front().rects.front().x1 -
                                                                 a.global.front().matches.front().rects.front().x0;
  const int cell = patch * scale;
  const int gap = 2;
  ImageSample canvas = ImageSample::zeros(any.channels, static_cast<int>(a.global.size()) * (cell + gap) + gap,
                                          static_cast<int>(cols) * (cell + gap) + gap);
  canvas.pixels.setOnes();
  for (std::size_t row = 0; row < a.global.size(); ++row)
    for (std::size_t col = 0; col < a.global[row].matches.size(); ++col) {
      const auto& m = a.global[row].matches[col];
      const ImageSample& src = d.samples.at(static_cast<std::size_t>(m.sample_index));
      const Rect r = cover(m.rects);
      const int oy = gap + static_cast<int>(row) * (cell + gap);
      const int ox = gap + static_cast<int>(col) * (cell + gap);
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) {
          const int sy = r.y0 + y * (r.y1 - r.y0) / cell;
          const int sx = r.x0 + x * (r.x1 - r.x0) / cell;
          for (int ch = 0; ch < canvas.channels; ++ch) canvas.at(ch, oy + y, ox + x) = src.at(ch, sy, sx);
        }
    }
  write_png(png_path, canvas);
  a.images.push_back(png_path.filename().string());
}

void render_local(const LocalAnalysis& l, const ImageSample& x, const std::filesystem::path& png_path, int top, int scale) {
  static const std::array<std::array<float, 3>, 3> kColors{{{0.0f, 1.0f, 0.0f}, {0.0f, 0.6f, 1.0f}, {1.0f, 0.0f, 1.0f}}};
  ImageSample out = ImageSample::zeros(x.channels, x.height * scale, x.width * scale, x.label);
  for (int ch = 0; ch < x.channels; ++ch)
    for (int y = 0; y < out.height; ++y)
      for (int c = 0; c < out.width; ++c) out.at(ch, y, c) = x.at(ch, y / scale, c / scale);
  const int n = std::min(top, static_cast<int>(l.by_contribution.size()));
  for (int k = n - 1; k >= 0; --k) {
    const auto& color = kColors[static_cast<std::size_t>(k) % kColors.size()];
    for (const auto& r : l.by_contribution[static_cast<std::size_t>(k)].rects) {
      const int x0 = r.x0 * scale, y0 = r.y0 * scale, x1 = r.x1 * scale - 1, y1 = r.y1 * scale - 1;
      for (int ch = 0; ch < out.channels; ++ch) {
        const float v = out.channels == 3 ? color[static_cast<std::size_t>(ch)] : 1.0f;
        for (int xx = x0; xx <= x1; ++xx) out.at(ch, y0, xx) = out.at(ch, y1, xx) = v;
        for (int yy = y0; yy <= y1; ++yy) out.at(ch, yy, x0) = out.at(ch, yy, x1) = v;
      }
    }
  }
  write_png(png_path, out);
}

void to_json(nlohmann::json& j, const Rect& r) { j = {r.x0, r.y0, r.x1, r.y1}; }

void from_json(const nlohmann::json& j, Rect& r) {
  r = Rect{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

namespace {

nlohmann::json local_entries(const std::vector<LocalEntry>& es) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : es)
    out.push_back({{"prototype", e.prototype}, {"contribution", e.contribution}, {"similarity", e.similarity},
                   {"patches", e.patches}, {"rects", e.rects}});
  return out;
}

std::vector<LocalEntry> local_entries_from(const nlohmann::json& j) {
  std::vector<LocalEntry> out;
  for (const auto& e : j)
    out.push_back({e.at("prototype").get<int>(), e.at("contribution").get<double>(), e.at("similarity").get<double>(),
                   e.at("patches").get<std::vector<int>>(), e.at("rects").get<std::vector<Rect>>()});
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const AnalysisArtifact& a) {
  j = {{"kind", a.kind}, {"image_size", a.image_size}, {"images", a.images}};
  if (a.kind == "global") {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& e : a.global) {
      nlohmann::json ms = nlohmann::json::array();
      for (const auto& m : e.matches)
        ms.push_back({{"score", m.score}, {"sample_index", m.sample_index}, {"sample_id", m.sample_id}, {"patches", m.patches},
                      {"rects", m.rects}});
      items.push_back({{"prototype", e.prototype}, {"matches", ms}});
    }
    j["items"] = items;
  } else {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& l : a.local)
      items.push_back({{"sample_id", l.sample_id}, {"prediction", l.prediction}, {"class_score", l.class_score},
                       {"by_contribution", local_entries(l.by_contribution)}, {"by_similarity", local_entries(l.by_similarity)},
                       {"bbox", l.bbox}});
    j["items"] = items;
  }
}

void from_json(const nlohmann::json& j, AnalysisArtifact& a) {
  a = AnalysisArtifact{};
  a.kind = j.at("kind").get<std::string>();
  a.image_size = j.value("image_size", 0);
  a.images = j.value("images", std::vector<std::string>{});
  for (const auto& item : j.at("items")) {
    if (a.kind == "global") {
      GlobalEntry e;
      e.prototype = item.at("prototype").get<int>();
      for (const auto& m : item.at("matches"))
        e.matches.push_back({m.at("score").get<double>(), m.at("sample_index").get<int>(), m.at("sample_id").get<std::string>(),
                             m.at("patches").get<std::vector<int>>(), m.at("rects").get<std::vector<Rect>>()});
      a.global.push_back(std::move(e));
    } else {
      LocalAnalysis l;
      l.sample_id = item.at("sample_id").get<std::string>();
      l.prediction = item.at("prediction").get<int>();
      l.class_score = item.at("class_score").get<double>();
      l.by_contribution = local_entries_from(item.at("by_contribution"));
      l.by_similarity = local_entries_from(item.at("by_similarity"));
      l.bbox = item.at("bbox").get<Rect>();
      a.local.push_back(std::move(l));
    }
  }
}

}  // namespace protolab
