#include "protolab/attacks.hpp"

#include <chrono>
#include <cstring>

namespace protolab {

namespace {

constexpr std::uint64_t kSelectStream = 0x70u;
constexpr std::uint64_t kTriggerStream = 0x71u;
constexpr std::uint64_t kLabelStream = 0x72u;
constexpr std::uint64_t kSubsetStream = 0x73u;
constexpr std::uint64_t kAttackShuffle = 0x74u;

bool bit_equal(const Model& a, const Model& b) {
  std::vector<const Matrix<float>*> ma, mb;
  visit_params(const_cast<Model&>(a), [&](const std::string&, ParamGroup, Matrix<float>& m) { ma.push_back(&m); });
  visit_params(const_cast<Model&>(b), [&](const std::string&, ParamGroup, Matrix<float>& m) { mb.push_back(&m); });
  if (ma.size() != mb.size()) return false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    if (ma[i]->rows() != mb[i]->rows() || ma[i]->cols() != mb[i]->cols()) return false;
    if (std::memcmp(ma[i]->data(), mb[i]->data(), sizeof(float) * static_cast<std::size_t>(ma[i]->size())) != 0) return false;
  }
  return true;
}

}  // namespace

std::string to_string(Corner c) {
  switch (c) {
    case Corner::top_left: return "top-left";
    case Corner::top_right: return "top-right";
    case Corner::bottom_left: return "bottom-left";
    case Corner::bottom_right: return "bottom-right";
  }
  return "?";
}

Corner corner_from_string(const std::string& s) {
  for (Corner c : kAllCorners)
    if (to_string(c) == s) return c;
  throw ConfigError("unknown corner '" + s + "'");
}

std::vector<std::string> builtin_trigger_names() { return {"checkerboard", "stripes", "square", "cross"}; }

TriggerPatch builtin_trigger(const std::string& name, int channels, int size) {
  TriggerPatch t;
  t.name = name;
  t.channels = channels;
  t.height = size;
  t.width = size;
  t.pixels = Matrix<float>::Zero(channels * size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      for (int ch = 0; ch < channels; ++ch) {
        float v = 0;
        if (name == "checkerboard") {
          v = ((r / 2 + c / 2) % 2 == 0) ? 1.0f : 0.0f;
        } else if (name == "stripes") {
          v = ((r + c) % 4 < 2) ? 1.0f : 0.0f;
        } else if (name == "square") {
          v = (ch == 1 && channels == 3) ? 0.0f : 1.0f;  // magenta on colour images
        } else if (name == "cross") {
          const int mid = size / 2;
          v = (r == mid || r == mid - 1 || c == mid || c == mid - 1) ? 1.0f : 0.0f;
        } else {
          throw ConfigError("unknown trigger '" + name + "'");
        }
        t.pixels(ch * size + r, c) = v;
      }
  return t;
}

Rect trigger_rect(const TriggerPatch& t, Corner corner, int height, int width) {
  const bool right = corner == Corner::top_right || corner == Corner::bottom_right;
  const bool bottom = corner == Corner::bottom_left || corner == Corner::bottom_right;
  const int x0 = right ? width - t.width : 0;
  const int y0 = bottom ? height - t.height : 0;
  return Rect{x0, y0, x0 + t.width, y0 + t.height};
}

ImageSample apply_trigger(const ImageSample& x, const TriggerPatch& t, Corner corner) {
  if (t.height == 0 || t.width == 0) return x;
  if (t.height >= x.height || t.width >= x.width)
    throw ConfigError("trigger '" + t.name + "' (" + std::to_string(t.height) + "x" + std::to_string(t.width) +
                      ") does not fit a " + std::to_string(x.height) + "x" + std::to_string(x.width) + " image");
  if (t.channels != x.channels) throw ConfigError("trigger '" + t.name + "' channel count differs from the image");
  ImageSample out = x;
  const Rect r = trigger_rect(t, corner, x.height, x.width);
  for (int ch = 0; ch < x.channels; ++ch)
    for (int dy = 0; dy < t.height; ++dy)
      for (int dx = 0; dx < t.width; ++dx) out.at(ch, r.y0 + dy, r.x0 + dx) = t.at(ch, dy, dx);
  return out;
}

int flip_label(int y) {
  if (y != 0 && y != 1) throw DomainError("flip_label: label " + std::to_string(y) + " is not binary");
  return 1 - y;
}

void PoisonConfig::validate() const {
  if (triggers.empty()) throw ConfigError("poison config needs at least one trigger");
  if (corners.empty()) throw ConfigError("poison config needs at least one corner");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("poison ratio must lie in [0,1]");
}

PoisonConfig default_poison_config(std::uint64_t seed) {
  PoisonConfig c;
  for (const auto& name : builtin_trigger_names()) c.triggers.push_back(builtin_trigger(name));
  c.corners.assign(kAllCorners.begin(), kAllCorners.end());
  c.ratio = 1.0;
  c.seed = seed;
  return c;
}

std::pair<int, Corner> trigger_choice(const PoisonConfig& cfg, std::size_t index) {
  cfg.validate();
  auto rng = substream(cfg.seed, kTriggerStream, index);
  std::uniform_int_distribution<int> pick_t(0, static_cast<int>(cfg.triggers.size()) - 1);
  std::uniform_int_distribution<int> pick_c(0, static_cast<int>(cfg.corners.size()) - 1);
  const int t = pick_t(rng);
  const int c = pick_c(rng);
  return {t, cfg.corners[static_cast<std::size_t>(c)]};
}

TriggerSet poison_dataset(const Dataset& d, const PoisonConfig& cfg) {
  cfg.validate();
  TriggerSet out;
  out.data.class_names = d.class_names;
  out.data.split = d.split + "+trigger";
  const std::size_t n = d.size();
  const auto m = static_cast<std::size_t>(std::floor(cfg.ratio * static_cast<double>(n)));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = substream(cfg.seed, kSelectStream, 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(m);
  std::sort(order.begin(), order.end());
  for (int src : order) {
    const auto [ti, corner] = trigger_choice(cfg, static_cast<std::size_t>(src));
    ImageSample x = apply_trigger(d.samples[static_cast<std::size_t>(src)], cfg.triggers[static_cast<std::size_t>(ti)], corner);
    x.label = flip_label(x.label);
    x.id += "#" + cfg.triggers[static_cast<std::size_t>(ti)].name + "@" + to_string(corner);
    out.data.samples.push_back(std::move(x));
    out.source.push_back(src);
    out.trigger.push_back(ti);
    out.corner.push_back(corner);
  }
  return out;
}

Dataset assign_random_labels(const Dataset& d, int num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw ConfigError("assign_random_labels: need at least one class");
  Dataset out = d;
  if (out.num_classes() != num_classes) {
    out.class_names.clear();
    for (int c = 0; c < num_classes; ++c) out.class_names.push_back("class" + std::to_string(c));
  }
  std::uniform_int_distribution<int> pick(0, num_classes - 1);
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    auto rng = substream(seed, kLabelStream, i);
    out.samples[i].label = pick(rng);
  }
  return out;
}

std::vector<int> choose_prototypes(int num_prototypes, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("substitution fraction must lie in [0,1]");
  std::vector<int> all(static_cast<std::size_t>(num_prototypes));
  std::iota(all.begin(), all.end(), 0);
  auto rng = substream(seed, kSubsetStream, 0);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(std::floor(fraction * num_prototypes)));
  std::sort(all.begin(), all.end());
  return all;
}

AttackState backdoor_finetune(const Model& theta, const Dataset& train, const PoisonConfig& cfg, const LossWeights& w,
                              const BackdoorOptions& opts) {
  if (theta.variant() != Variant::pipnet) throw ConfigError("backdoor fine-tuning requires the pipnet variant");
  if (opts.epochs < 0 || opts.batch_size < 1) throw ConfigError("backdoor: epochs must be >= 0 and batch_size >= 1");
  cfg.validate();
  w.validate();
  train.validate();
  AttackState st{theta, theta, {}};
  const Model snapshot = theta;
  if (opts.epochs == 0) return st;

  AdamW<float> adam(st.attacked, AdamWConfig{});
  const std::size_t n = train.size();
  const std::size_t bs = static_cast<std::size_t>(opts.batch_size);
  const long total_steps = static_cast<long>((n + bs - 1) / bs) * opts.epochs;
  long step = 0;
  const ModelConfig& mc = theta.config;
  st.log.stage_starts.emplace_back("backdoor", 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fresh trigger draws every epoch; deterministic in (cfg.seed, epoch).
    PoisonConfig epoch_cfg = cfg;
    epoch_cfg.seed = substream(cfg.seed, kAttackShuffle, static_cast<std::uint64_t>(epoch) + 1)();
    const TriggerSet ts = poison_dataset(train, epoch_cfg);
    std::vector<int> poisoned(n, -1);
    for (std::size_t k = 0; k < ts.source.size(); ++k) poisoned[static_cast<std::size_t>(ts.source[k])] = static_cast<int>(k);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = substream(opts.seed, kAttackShuffle, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.stage = "backdoor";
    rec.epoch = epoch;
    rec.stage_epoch = epoch;
    long batches = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batches) {
      AttackBatch b;
      for (std::size_t k = start; k < std::min(n, start + bs); ++k) {
        const int i = order[k];
        b.clean.push_back(train.samples[static_cast<std::size_t>(i)]);
        if (poisoned[static_cast<std::size_t>(i)] >= 0) {
          b.triggered.push_back(ts.data.samples[static_cast<std::size_t>(poisoned[static_cast<std::size_t>(i)])]);
          b.source.push_back(static_cast<int>(b.clean.size()) - 1);
        }
      }
      Tape<float> tape;
      auto rv = bind_constant(tape, st.ref);
      auto av = bind_trainable(tape, st.attacked);
      LossGraph<float> g = adversarial_loss_graph(tape, rv, av, mc, b, w);
      const LossValue lv = g.value();
      if (!std::isfinite(lv.total)) throw NumericalError("divergence in backdoor epoch " + std::to_string(epoch) + ": non-finite loss");
      tape.backward(g.total);
      ModelParams<float> grads;
      try {
        grads = collect_grads(tape, av, st.attacked);
      } catch (const NumericalError& err) {
        throw NumericalError("divergence in backdoor epoch " + std::to_string(epoch) + ": " + err.what());
      }
      const double factor = opts.cosine ? cosine_annealing(1.0, step++, total_steps) : 1.0;
      adam.step(st.attacked, grads, [&](ParamGroup g) { return factor * (g == ParamGroup::head ? opts.lr_head : opts.lr); });
      st.attacked.head.weights = st.attacked.head.weights.cwiseMax(0.0f);
      rec.loss += lv.total;
      for (const auto& [k, v] : lv.terms) rec.terms[k] += v;
    }
    rec.loss /= static_cast<double>(batches);
    for (auto& [k, v] : rec.terms) v /= static_cast<double>(batches);
    std::size_t correct = 0;
    for (const auto& x : train.samples)
      if (predict(x, st.attacked) == x.label) ++correct;
    rec.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.log.records.push_back(std::move(rec));
  }
  if (!bit_equal(st.ref, snapshot)) throw InvariantViolation("reference parameters changed during backdoor fine-tuning");
  return st;
}

void to_json(nlohmann::json& j, const PoisonConfig& c) {
  nlohmann::json triggers = nlohmann::json::array();
  for (const auto& t : c.triggers) {
    const auto names = builtin_trigger_names();
    const bool builtin = std::find(names.begin(), names.end(), t.name) != names.end() &&
                         t.pixels == builtin_trigger(t.name, t.channels, t.height).pixels;
    if (builtin) {
      triggers.push_back(t.name);
    } else {
      std::vector<float> flat(t.pixels.size());
      for (int ch = 0; ch < t.channels; ++ch)
        for (int r = 0; r < t.height; ++r)
          for (int col = 0; col < t.width; ++col) flat[static_cast<std::size_t>((ch * t.height + r) * t.width + col)] = t.at(ch, r, col);
      triggers.push_back({{"name", t.name}, {"channels", t.channels}, {"height", t.height}, {"width", t.width}, {"pixels", flat}});
    }
  }
  std::vector<std::string> corners;
  for (Corner k : c.corners) corners.push_back(to_string(k));
  j = {{"triggers", triggers}, {"corners", corners}, {"ratio", c.ratio}, {"label_rule", "flip"}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PoisonConfig& c) {
  c = default_poison_config(j.value("seed", std::uint64_t{0}));
  if (j.contains("triggers")) {
    c.triggers.clear();
    for (const auto& t : j.at("triggers")) {
      if (t.is_string()) {
        c.triggers.push_back(builtin_trigger(t.get<std::string>()));
        continue;
      }
      TriggerPatch p;
      p.name = t.at("name").get<std::string>();
      p.channels = t.value("channels", 3);
      p.height = t.at("height").get<int>();
      p.width = t.at("width").get<int>();
      const auto flat = t.at("pixels").get<std::vector<float>>();
      if (flat.size() != static_cast<std::size_t>(p.channels * p.height * p.width))
        throw ConfigError("trigger '" + p.name + "': pixel count does not match its shape");
      p.pixels.resize(p.channels * p.height, p.width);
      for (int ch = 0; ch < p.channels; ++ch)
        for (int r = 0; r < p.height; ++r)
          for (int col = 0; col < p.width; ++col) {
            const float v = flat[static_cast<std::size_t>((ch * p.height + r) * p.width + col)];
            if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("trigger '" + p.name + "': pixel outside [0,1]");
            p.pixels(ch * p.height + r, col) = v;
          }
      c.triggers.push_back(std::move(p));
    }
  }
  if (j.contains("corners")) {
    c.corners.clear();
    for (const auto& s : j.at("corners")) c.corners.push_back(corner_from_string(s.get<std::string>()));
  }
  c.ratio = j.value("ratio", c.ratio);
  if (j.value("label_rule", std::string("flip")) != "flip") throw ConfigError("only the 'flip' label rule is supported");
  c.validate();
}

void to_json(nlohmann::json& j, const BackdoorOptions& o) {
  j = {{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"lr", o.lr}, {"lr_head", o.lr_head}, {"cosine", o.cosine}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, BackdoorOptions& o) {
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.lr = j.value("lr", o.lr);
  o.lr_head = j.value("lr_head", o.lr_head);
  o.cosine = j.value("cosine", o.cosine);
  o.seed = j.value("seed", o.seed);
}

}  // namespace protolab
