#include "protolab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "protolab/serialize.hpp"

namespace protolab {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5Eu;

StageConfig stage(std::string name, int epochs, std::map<ParamGroup, double> lr, bool cosine = false) {
  StageConfig s;
  s.name = std::move(name);
  s.epochs = epochs;
  s.lr = std::move(lr);
  s.cosine = cosine;
  return s;
}

std::vector<int> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = substream(seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double train_accuracy(const Model& m, const Dataset& d) {
  if (d.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& x : d.samples)
    if (predict(x, m) == x.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

AugmentationPolicy policy_for(const TrainConfig& cfg) {
  if (cfg.augmentation) return *cfg.augmentation;
  return cfg.model.variant == Variant::protovit ? protovit_augmentation(cfg.seed) : pipnet_augmentation(cfg.seed);
}

// Classification-only objective, shared by protovit, cbm and head fine-tuning.
BatchLossFn classification_objective(const Dataset& d, const ModelConfig& mc, std::optional<AugmentationPolicy> policy) {
  return [&d, mc, policy](Tape<float>& tape, const ModelVars<float>& v, std::span<const int> idx, int epoch) {
    std::vector<ImageSample> xs;
    std::vector<int> labels;
    for (int i : idx) {
      const auto& x = d.samples[static_cast<std::size_t>(i)];
      const std::uint64_t key = static_cast<std::uint64_t>(epoch) * d.size() + static_cast<std::uint64_t>(i);
      xs.push_back(policy ? augment(x, *policy, key) : x);
      labels.push_back(x.label);
    }
    LossGraph<float> g;
    g.names = {"classification"};
    g.terms = {ad::nll_mean(training_probs(tape, v, mc, std::span<const ImageSample>(xs)), std::span<const int>(labels))};
    g.weights = {1.0};
    g.total = g.terms[0];
    return g;
  };
}

void check_stages(const TrainConfig& cfg) {
  for (const auto& s : cfg.stages) {
    if (s.kind == "project" && cfg.model.variant != Variant::protovit)
      throw ConfigError("stage '" + s.name + "': projection applies to protovit only");
    if (s.kind == "train" && s.weights && cfg.model.variant != Variant::pipnet)
      throw ConfigError("stage '" + s.name + "': loss weights apply to pipnet only");
  }
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  loss_preset(loss_profile);
  for (const auto& s : stages) {
    if (s.kind != "train" && s.kind != "project" && s.kind != "slots_pruning")
      throw ConfigError("stage '" + s.name + "': unknown kind '" + s.kind + "'");
    if (s.epochs < 0) throw ConfigError("stage '" + s.name + "': epochs must be >= 0");
    for (const auto& [g, rate] : s.lr)
      if (!(rate > 0) || !std::isfinite(rate))
        throw ConfigError("stage '" + s.name + "': learning rate for " + to_string(g) + " must be positive (omit the group to freeze it)");
    if (s.weights) s.weights->validate();
  }
}

// Four-stage schedules scaled down to at most 20 epochs. The encoder trains from
// scratch here, so its rate is above the pretrained-backbone value.
TrainConfig default_pipnet_config(std::uint64_t seed) {
  TrainConfig c;
  c.model.variant = Variant::pipnet;
  c.model.num_prototypes = 16;
  c.model.embed_dim = 64;
  c.model.depth = 2;
  c.model.seed = seed;
  c.seed = seed;
  // Small batches: with 20 epochs on a few dozen images, 16 leaves too few steps.
  c.batch_size = 4;
  const double lr_f = 1e-2, lr_h = 5e-2;
  LossWeights pretrain = loss_preset("train");
  pretrain.classification = 0;
  StageConfig s1 = stage("pretrain", 2, {{ParamGroup::backbone, lr_f}, {ParamGroup::neck, lr_f}, {ParamGroup::prototypes, lr_f}}, true);
  s1.weights = pretrain;
  c.stages = {
      s1,
      stage("head", 1, {{ParamGroup::head, lr_h}}, true),
      stage("backbone_frozen", 2, {{ParamGroup::neck, lr_f}, {ParamGroup::prototypes, lr_f}, {ParamGroup::head, lr_h}}, true),
      stage("full", 15, {{ParamGroup::backbone, lr_f}, {ParamGroup::neck, lr_f}, {ParamGroup::prototypes, lr_f}, {ParamGroup::head, lr_h}},
            true),
  };
  return c;
}

TrainConfig default_protovit_config(std::uint64_t seed) {
  TrainConfig c;
  c.model.variant = Variant::protovit;
  c.model.num_prototypes = 10;
  c.model.token_count = 2;
  c.model.seed = seed;
  c.seed = seed;
  c.batch_size = 16;
  StageConfig project;
  project.name = "projection";
  project.kind = "project";
  StageConfig pruning;
  pruning.name = "slots_pruning";
  pruning.kind = "slots_pruning";
  c.stages = {
      stage("warmup", 3, {{ParamGroup::neck, 3e-3}, {ParamGroup::prototypes, 3e-3}}),
      stage("joint", 6, {{ParamGroup::backbone, 2e-3}, {ParamGroup::neck, 2e-3}, {ParamGroup::prototypes, 3e-3}}),
      pruning,
      project,
      stage("last_layer", 6, {{ParamGroup::head, 1e-2}}),
  };
  return c;
}

TrainConfig default_cbm_config(std::uint64_t seed) {
  TrainConfig c;
  c.model.variant = Variant::cbm;
  c.model.num_prototypes = 8;
  c.model.seed = seed;
  c.seed = seed;
  c.stages = {stage("joint", 10, {{ParamGroup::backbone, 2e-3}, {ParamGroup::neck, 2e-3}, {ParamGroup::prototypes, 2e-3}, {ParamGroup::head, 2e-3}})};
  return c;
}

TrainConfig default_train_config(Variant v, std::uint64_t seed) {
  switch (v) {
    case Variant::pipnet: return default_pipnet_config(seed);
    case Variant::protovit: return default_protovit_config(seed);
    case Variant::cbm: return default_cbm_config(seed);
  }
  throw ConfigError("unknown variant");
}

void run_stage(Model& model, const StageConfig& st, const Dataset& d, int batch_size, std::uint64_t seed, const AdamWConfig& opt,
               const BatchLossFn& loss, TrainLog& log) {
  if (st.epochs == 0) return;
  if (d.empty()) throw DataError("training set is empty");
  const auto trainable = [&st](ParamGroup g) { return st.rate(g) > 0; };
  AdamW<float> adam(model, opt);
  const std::size_t n = d.size();
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total_steps = steps_per_epoch * st.epochs;
  long step = 0;
  log.stage_starts.emplace_back(st.name, log.next_epoch());

  for (int e = 0; e < st.epochs; ++e) {
    const int epoch = log.next_epoch();
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(n, seed, epoch);
    EpochRecord rec;
    rec.stage = st.name;
    rec.epoch = epoch;
    rec.stage_epoch = e;
    for (std::size_t start = 0; start < n; start += bs, ++step) {
      const std::size_t stop = std::min(n, start + bs);
      std::span<const int> idx(order.data() + start, stop - start);
      Tape<float> tape;
      auto vars = bind(tape, model, trainable);
      LossGraph<float> g = loss(tape, vars, idx, epoch);
      const LossValue lv = g.value();
      const std::string where = "stage '" + st.name + "' epoch " + std::to_string(e);
      if (!std::isfinite(lv.total)) throw NumericalError("divergence in " + where + ": non-finite loss");
      tape.backward(g.total);
      ModelParams<float> grads;
      try {
        grads = collect_grads(tape, vars, model);
      } catch (const NumericalError& err) {
        throw NumericalError("divergence in " + where + ": " + err.what());
      }
      const double factor = st.cosine ? cosine_annealing(1.0, step, total_steps) : 1.0;
      adam.step(model, grads, [&](ParamGroup grp) { return st.rate(grp) * factor; });
      if (model.variant() == Variant::pipnet && st.rate(ParamGroup::head) > 0) model.head.weights = model.head.weights.cwiseMax(0.0f);
      rec.loss += lv.total;
      for (const auto& [k, v] : lv.terms) rec.terms[k] += v;
    }
    rec.loss /= static_cast<double>(steps_per_epoch);
    for (auto& [k, v] : rec.terms) v /= static_cast<double>(steps_per_epoch);
    rec.accuracy = train_accuracy(model, d);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back(std::move(rec));
  }
}

TrainResult train_pipnet(const Dataset& train, const TrainConfig& cfg) {
  if (cfg.model.variant != Variant::pipnet) throw ConfigError("train_pipnet: config variant is " + to_string(cfg.model.variant));
  cfg.validate();
  check_stages(cfg);
  train.validate();
  TrainResult r{init_model<float>(cfg.model), {}};
  const AugmentationPolicy policy = policy_for(cfg);
  const ModelConfig mc = cfg.model;
  for (const auto& st : cfg.stages) {
    if (st.kind != "train") continue;
    const LossWeights w = st.weights ? *st.weights : loss_preset(cfg.loss_profile);
    BatchLossFn fn = [&](Tape<float>& tape, const ModelVars<float>& v, std::span<const int> idx, int epoch) {
      TwoViewBatch b;
      for (int i : idx) {
        const auto& x = train.samples[static_cast<std::size_t>(i)];
        auto [va, vb] = two_views(x, policy, static_cast<std::uint64_t>(epoch) * train.size() + static_cast<std::uint64_t>(i));
        b.view_a.push_back(std::move(va));
        b.view_b.push_back(std::move(vb));
        b.labels.push_back(x.label);
      }
      return pipnet_loss_graph(tape, v, mc, b, w);
    };
    run_stage(r.model, st, train, cfg.batch_size, cfg.seed, cfg.optimizer, fn, r.log);
  }
  return r;
}

TrainResult train_protovit(const Dataset& train, const TrainConfig& cfg) {
  if (cfg.model.variant != Variant::protovit) throw ConfigError("train_protovit: config variant is " + to_string(cfg.model.variant));
  cfg.validate();
  check_stages(cfg);
  train.validate();
  const auto projections = std::count_if(cfg.stages.begin(), cfg.stages.end(), [](const StageConfig& s) { return s.kind == "project"; });
  if (projections != 1) throw ConfigError("protovit training needs exactly one projection stage");
  TrainResult r{init_model<float>(cfg.model), {}};
  const auto fn = classification_objective(train, cfg.model, policy_for(cfg));
  for (const auto& st : cfg.stages) {
    if (st.kind == "project") {
      r.model = project_prototypes(r.model, train);
    } else if (st.kind == "train") {
      run_stage(r.model, st, train, cfg.batch_size, cfg.seed, cfg.optimizer, fn, r.log);
    }
  }
  return r;
}

TrainResult train_cbm(const Dataset& train, const TrainConfig& cfg) {
  if (cfg.model.variant != Variant::cbm) throw ConfigError("train_cbm: config variant is " + to_string(cfg.model.variant));
  cfg.validate();
  check_stages(cfg);
  train.validate();
  TrainResult r{init_model<float>(cfg.model), {}};
  const auto fn = classification_objective(train, cfg.model, policy_for(cfg));
  for (const auto& st : cfg.stages)
    if (st.kind == "train") run_stage(r.model, st, train, cfg.batch_size, cfg.seed, cfg.optimizer, fn, r.log);
  return r;
}

TrainResult train_model(const Dataset& train, const TrainConfig& cfg) {
  switch (cfg.model.variant) {
    case Variant::pipnet: return train_pipnet(train, cfg);
    case Variant::protovit: return train_protovit(train, cfg);
    case Variant::cbm: return train_cbm(train, cfg);
  }
  throw ConfigError("unknown variant");
}

TrainResult finetune_last_layer(const Model& theta, const Dataset& d, int epochs, double lr, int batch_size, std::uint64_t seed) {
  TrainResult r{theta, {}};
  if (epochs == 0) return r;
  d.validate();
  StageConfig st = stage("last_layer", epochs, {{ParamGroup::head, lr}});
  run_stage(r.model, st, d, batch_size, seed, AdamWConfig{}, classification_objective(d, theta.config, std::nullopt), r.log);
  return r;
}

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
  return out.str();
}

TrainLog TrainLog::from_jsonl(const std::string& text) {
  TrainLog log;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r = nlohmann::json::parse(line).get<EpochRecord>();
    if (!log.records.empty() && r.epoch <= log.records.back().epoch) throw DataError("train log epochs are not increasing");
    if (log.records.empty() || log.records.back().stage != r.stage || r.stage_epoch == 0) log.stage_starts.emplace_back(r.stage, r.epoch);
    log.records.push_back(std::move(r));
  }
  return log;
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"classification", w.classification}, {"alignment", w.alignment},         {"uniformity", w.uniformity},
       {"align_clean", w.align_clean},       {"align_trigger", w.align_trigger}, {"uniform_clean", w.uniform_clean},
       {"uniform_trigger", w.uniform_trigger}};
}

// Accepts either a profile name or an object of weights.
void from_json(const nlohmann::json& j, LossWeights& w) {
  if (j.is_string()) {
    w = loss_preset(j.get<std::string>());
    return;
  }
  w.classification = j.value("classification", 0.0);
  w.alignment = j.value("alignment", 0.0);
  w.uniformity = j.value("uniformity", 0.0);
  w.align_clean = j.value("align_clean", 0.0);
  w.align_trigger = j.value("align_trigger", 0.0);
  w.uniform_clean = j.value("uniform_clean", 0.0);
  w.uniform_trigger = j.value("uniform_trigger", 0.0);
  w.validate();
}

void to_json(nlohmann::json& j, const StageConfig& s) {
  nlohmann::json lr = nlohmann::json::object();
  for (const auto& [g, rate] : s.lr) lr[to_string(g)] = rate;
  j = {{"name", s.name}, {"kind", s.kind}, {"epochs", s.epochs}, {"lr", lr}, {"cosine", s.cosine}};
  if (s.weights) j["weights"] = *s.weights;
}

void from_json(const nlohmann::json& j, StageConfig& s) {
  s.name = j.at("name").get<std::string>();
  s.kind = j.value("kind", std::string("train"));
  s.epochs = j.value("epochs", 0);
  s.lr.clear();
  if (j.contains("lr"))
    for (const auto& [k, v] : j.at("lr").items()) s.lr[param_group_from_string(k)] = v.get<double>();
  s.cosine = j.value("cosine", false);
  if (j.contains("weights")) s.weights = j.at("weights").get<LossWeights>();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"stages", c.stages},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"loss_profile", c.loss_profile},
       {"optimizer", {{"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}, {"weight_decay", c.optimizer.weight_decay}}}};
  if (c.augmentation) j["augmentation"] = *c.augmentation;
}

// Missing fields fall back to the variant's default schedule.
void from_json(const nlohmann::json& j, TrainConfig& c) {
  ModelConfig mc;
  if (j.contains("model")) mc = j.at("model").get<ModelConfig>();
  const std::uint64_t seed = j.value("seed", mc.seed);
  c = default_train_config(mc.variant, seed);
  if (j.contains("model")) {
    nlohmann::json merged = c.model;
    merged.update(j.at("model"));
    if (!j.at("model").contains("seed")) merged["seed"] = seed;
    c.model = merged.get<ModelConfig>();
  }
  if (j.contains("stages")) c.stages = j.at("stages").get<std::vector<StageConfig>>();
  c.batch_size = j.value("batch_size", c.batch_size);
  c.loss_profile = j.value("loss_profile", c.loss_profile);
  if (j.contains("augmentation")) c.augmentation = j.at("augmentation").get<AugmentationPolicy>();
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  }
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"stage", r.stage}, {"epoch", r.epoch}, {"stage_epoch", r.stage_epoch}, {"loss", r.loss},
       {"terms", r.terms}, {"accuracy", r.accuracy}, {"wall_seconds", r.wall_seconds}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.stage = j.at("stage").get<std::string>();
  r.epoch = j.at("epoch").get<int>();
  r.stage_epoch = j.value("stage_epoch", 0);
  r.loss = j.at("loss").get<double>();
  r.terms = j.value("terms", std::map<std::string, double>{});
  r.accuracy = j.value("accuracy", 0.0);
  r.wall_seconds = j.value("wall_seconds", 0.0);
}

}  // namespace protolab
