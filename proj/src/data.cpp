#include "protolab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "protolab/attacks.hpp"
#include "protolab/image_io.hpp"

namespace protolab {

namespace fs = std::filesystem;

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

void Dataset::validate() const {
  if (samples.empty()) throw DataError("empty dataset");
  const auto& first = samples.front();
  for (const auto& s : samples) {
    if (s.channels != first.channels || s.height != first.height || s.width != first.width)
      throw DataError("inconsistent image dimensions in dataset (sample '" + s.id + "')");
    if (s.label != kNoLabel && (s.label < 0 || s.label >= std::max(1, num_classes())))
      throw DataError("label out of range in sample '" + s.id + "'");
  }
}

SyntheticSpec default_synthetic_spec(const std::string& split, int count_per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.split = split;
  s.count_per_class = count_per_class;
  s.seed = seed;
  ShapeClass circle{"circle", "circle", {0.75f, 0.10f, 0.10f}, {0.95f, 0.35f, 0.30f}, 5, 8};
  ShapeClass square{"square", "square", {0.80f, 0.60f, 0.05f}, {1.00f, 0.85f, 0.30f}, 5, 8};
  s.classes = {circle, square};
  return s;
}

SyntheticSpec default_ood_spec(int count_per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.split = "ood";
  s.count_per_class = count_per_class;
  s.seed = seed;
  // Shapes never seen in training, in any colour.
  ShapeClass tri{"triangle", "triangle", {0.05f, 0.05f, 0.05f}, {0.95f, 0.95f, 0.95f}, 5, 8};
  ShapeClass cross{"cross", "cross", {0.05f, 0.05f, 0.05f}, {0.95f, 0.95f, 0.95f}, 5, 8};
  s.classes = {tri, cross};
  return s;
}

namespace {

bool inside(const std::string& shape, float dx, float dy, float s) {
  if (shape == "circle") return dx * dx + dy * dy <= s * s;
  if (shape == "square") return std::abs(dx) <= 0.85f * s && std::abs(dy) <= 0.85f * s;
  if (shape == "triangle") return dy >= -s && dy <= s && std::abs(dx) <= 0.5f * (dy + s);
  if (shape == "cross") return (std::abs(dx) <= s / 3 && std::abs(dy) <= s) || (std::abs(dy) <= s / 3 && std::abs(dx) <= s);
  if (shape == "ring") {
    const float r2 = dx * dx + dy * dy;
    return r2 <= s * s && r2 >= 0.25f * s * s;
  }
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= s;
  throw ConfigError("unknown synthetic shape '" + shape + "'");
}

std::uint64_t split_code(const std::string& split) { return fnv1a(split.data(), split.size()); }

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.count_per_class <= 0 || spec.classes.empty()) throw DataError("empty dataset");
  if (spec.channels != 3 && spec.channels != 1) throw ConfigError("synthetic: channels must be 1 or 3");
  for (const auto& c : spec.classes) {
    if (c.size_min < 1 || c.size_max < c.size_min) throw ConfigError("synthetic: invalid size range for " + c.name);
    if (spec.margin < c.size_max || 2 * spec.margin > spec.image_size)
      throw ConfigError("synthetic: shape '" + c.name + "' does not fit inside the image");
  }
  Dataset d;
  d.split = spec.split;
  for (const auto& c : spec.classes) d.class_names.push_back(c.name);
  const std::uint64_t stream = split_code(spec.split);
  const int total = spec.count_per_class * static_cast<int>(spec.classes.size());
  d.samples.reserve(static_cast<std::size_t>(total));
  for (int idx = 0; idx < total; ++idx) {
    const int label = idx % static_cast<int>(spec.classes.size());
    const ShapeClass& cls = spec.classes[static_cast<std::size_t>(label)];
    auto rng = substream(spec.seed, stream, static_cast<std::uint64_t>(idx));
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::uniform_int_distribution<int> center(spec.margin, spec.image_size - spec.margin);
    std::uniform_int_distribution<int> size(cls.size_min, cls.size_max);
    const float cx = static_cast<float>(center(rng)) - 0.5f;
    const float cy = static_cast<float>(center(rng)) - 0.5f;
    const float s = static_cast<float>(size(rng));
    std::array<float, 3> color{};
    for (int ch = 0; ch < 3; ++ch) color[ch] = cls.color_min[ch] + unit(rng) * (cls.color_max[ch] - cls.color_min[ch]);

    ImageSample x = ImageSample::zeros(spec.channels, spec.image_size, spec.image_size, label);
    x.id = spec.split + "/" + std::to_string(idx);
    for (int r = 0; r < spec.image_size; ++r)
      for (int c = 0; c < spec.image_size; ++c) {
        const bool in = inside(cls.shape, static_cast<float>(c) - cx, static_cast<float>(r) - cy, s);
        for (int ch = 0; ch < spec.channels; ++ch) {
          const float noise = (unit(rng) * 2.0f - 1.0f) * spec.noise;
          const float base = in ? color[static_cast<std::size_t>(ch)] : spec.background;
          x.at(ch, r, c) = std::clamp(base + noise, 0.0f, 1.0f);
        }
      }
    d.samples.push_back(std::move(x));
  }
  return d;
}

Dataset load_image_folder(const fs::path& root, int image_size, const std::string& split) {
  if (!fs::is_directory(root)) throw DataError("not a directory: '" + root.string() + "'");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("no class directories under '" + root.string() + "'");
  Dataset d;
  d.split = split;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[label]))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("empty class directory '" + class_dirs[label].string() + "'");
    const std::string name = class_dirs[label].filename().string();
    d.class_names.push_back(name);
    for (const auto& f : files) {
      ImageSample x = resize(read_png(f), image_size);
      x.label = static_cast<int>(label);
      x.id = name + "/" + f.filename().string();
      d.samples.push_back(std::move(x));
    }
  }
  return d;
}

void write_image_folder(const Dataset& d, const fs::path& root) {
  d.validate();
  fs::create_directories(root);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& x = d.samples[i];
    const std::string cls = x.label == kNoLabel ? "unlabeled" : d.class_names.at(static_cast<std::size_t>(x.label));
    fs::create_directories(root / cls);
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << i << ".png";
    const fs::path rel = fs::path(cls) / name.str();
    write_png(root / rel, x);
    std::ifstream in(root / rel, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes.data(), bytes.size());
    entries.push_back({{"path", rel.string()}, {"label", x.label}, {"checksum", hex.str()}});
  }
  nlohmann::json manifest{{"split", d.split}, {"class_names", d.class_names}, {"samples", entries}};
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

AugmentationPolicy pipnet_augmentation(std::uint64_t seed) {
  AugmentationPolicy p;
  p.max_shift = 2;
  p.color_jitter = 0.15f;
  p.seed = seed;
  return p;
}

AugmentationPolicy protovit_augmentation(std::uint64_t seed) {
  AugmentationPolicy p;
  p.flip = true;
  p.max_rotation_deg = 10.0f;
  p.shear = 0.1f;
  p.max_shift = 2;
  p.seed = seed;
  return p;
}

ImageSample augment(const ImageSample& x, const AugmentationPolicy& policy, std::uint64_t key) {
  if (policy.empty()) return x;
  auto rng = substream(policy.seed, 0xA6u, key);
  std::uniform_real_distribution<float> sym(-1.0f, 1.0f);
  const bool flip = policy.flip && (rng() & 1u);
  const float angle = sym(rng) * policy.max_rotation_deg * 3.14159265f / 180.0f;
  const float shear = sym(rng) * policy.shear;
  std::uniform_int_distribution<int> shift_dist(-policy.max_shift, policy.max_shift);
  const int sx = shift_dist(rng);
  const int sy = shift_dist(rng);
  const float gain = 1.0f + sym(rng) * policy.color_jitter;
  const float offset = 0.5f * sym(rng) * policy.color_jitter;

  ImageSample out = x;
  const bool geometric = flip || angle != 0.0f || shear != 0.0f || sx != 0 || sy != 0;
  if (geometric) {
    const float cy = 0.5f * static_cast<float>(x.height - 1);
    const float cx = 0.5f * static_cast<float>(x.width - 1);
    const float ca = std::cos(angle), sa = std::sin(angle);
    auto sample = [&](int ch, float fy, float fx) {
      fy = std::clamp(fy, 0.0f, static_cast<float>(x.height - 1));
      fx = std::clamp(fx, 0.0f, static_cast<float>(x.width - 1));
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, x.height - 1), x1 = std::min(x0 + 1, x.width - 1);
      const float wy = fy - y0, wx = fx - x0;
      return (x.at(ch, y0, x0) * (1 - wx) + x.at(ch, y0, x1) * wx) * (1 - wy) +
             (x.at(ch, y1, x0) * (1 - wx) + x.at(ch, y1, x1) * wx) * wy;
    };
    for (int r = 0; r < x.height; ++r)
      for (int c = 0; c < x.width; ++c) {
        // Inverse map: undo shift, rotation, shear, then flip.
        float u = static_cast<float>(c - sx) - cx;
        float v = static_cast<float>(r - sy) - cy;
        const float ru = ca * u + sa * v;
        const float rv = -sa * u + ca * v;
        float su = ru - shear * rv;
        float srcx = su + cx;
        const float srcy = rv + cy;
        if (flip) srcx = static_cast<float>(x.width - 1) - srcx;
        for (int ch = 0; ch < x.channels; ++ch) out.at(ch, r, c) = sample(ch, srcy, srcx);
      }
  }
  if (policy.color_jitter != 0.0f)
    out.pixels = (out.pixels.array() * gain + offset).cwiseMax(0.0f).cwiseMin(1.0f).matrix();
  return out;
}

std::pair<ImageSample, ImageSample> two_views(const ImageSample& x, const AugmentationPolicy& policy, std::uint64_t key) {
  return {augment(x, policy, 2 * key), augment(x, policy, 2 * key + 1)};
}

Dataset build_projection_set(const Dataset& source, LabelMode mode, std::uint64_t seed, int num_classes) {
  switch (mode) {
    case LabelMode::keep: return source;
    case LabelMode::none: {
      Dataset d = source;
      for (auto& x : d.samples) x.label = kNoLabel;
      return d;
    }
    case LabelMode::random: return assign_random_labels(source, num_classes, seed);
  }
  return source;
}

void to_json(nlohmann::json& j, const ShapeClass& c) {
  j = {{"name", c.name}, {"shape", c.shape}, {"color_min", c.color_min}, {"color_max", c.color_max},
       {"size_min", c.size_min}, {"size_max", c.size_max}};
}

void from_json(const nlohmann::json& j, ShapeClass& c) {
  c.name = j.value("name", j.at("shape").get<std::string>());
  c.shape = j.at("shape").get<std::string>();
  if (j.contains("color_min")) c.color_min = j.at("color_min").get<std::array<float, 3>>();
  if (j.contains("color_max")) c.color_max = j.at("color_max").get<std::array<float, 3>>();
  c.size_min = j.value("size_min", c.size_min);
  c.size_max = j.value("size_max", c.size_max);
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"image_size", s.image_size}, {"channels", s.channels}, {"classes", s.classes},
       {"noise", s.noise},           {"background", s.background}, {"margin", s.margin},
       {"count_per_class", s.count_per_class}, {"seed", s.seed}, {"split", s.split}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.image_size = j.value("image_size", s.image_size);
  s.channels = j.value("channels", s.channels);
  if (j.contains("classes")) s.classes = j.at("classes").get<std::vector<ShapeClass>>();
  s.noise = j.value("noise", s.noise);
  s.background = j.value("background", s.background);
  s.margin = j.value("margin", s.margin);
  s.count_per_class = j.value("count_per_class", s.count_per_class);
  s.seed = j.value("seed", s.seed);
  s.split = j.value("split", s.split);
}

void to_json(nlohmann::json& j, const AugmentationPolicy& p) {
  j = {{"flip", p.flip}, {"max_rotation_deg", p.max_rotation_deg}, {"max_shift", p.max_shift},
       {"shear", p.shear}, {"color_jitter", p.color_jitter}, {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, AugmentationPolicy& p) {
  p.flip = j.value("flip", p.flip);
  p.max_rotation_deg = j.value("max_rotation_deg", p.max_rotation_deg);
  p.max_shift = j.value("max_shift", p.max_shift);
  p.shear = j.value("shear", p.shear);
  p.color_jitter = j.value("color_jitter", p.color_jitter);
  p.seed = j.value("seed", p.seed);
}

}  // namespace protolab
