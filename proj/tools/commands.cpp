#include "commands.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "protolab/serialize.hpp"

namespace protolab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

std::string checksum(const fs::path& p) {
  const std::string bytes = read_file(p);
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes.data(), bytes.size());
  return s.str();
}

// Adds a written file to the manifest; every file appears exactly once.
void record(json& manifest, const fs::path& out, const std::string& rel, const std::string& kind) {
  for (const auto& a : manifest["artifacts"])
    if (a.at("path") == rel) throw InvariantViolation("artifact '" + rel + "' recorded twice");
  manifest["artifacts"].push_back({{"path", rel}, {"kind", kind}, {"checksum", checksum(out / rel)}});
}

void write_json(json& manifest, const fs::path& out, const std::string& rel, const std::string& kind, const json& value) {
  write_file(out / rel, value.dump(2) + "\n");
  record(manifest, out, rel, kind);
}

json section(const json& cfg, const std::string& key) { return cfg.contains(key) ? cfg.at(key) : json::object(); }

std::uint64_t seed_of(const json& cfg) { return cfg.value("seed", std::uint64_t{0}); }

TrainConfig train_config(const json& cfg, std::uint64_t seed, Variant fallback) {
  json t = section(cfg, "train");
  if (!t.contains("seed")) t["seed"] = seed;
  if (!t.contains("model")) t["model"] = json::object();
  if (!t["model"].contains("variant")) t["model"]["variant"] = to_string(fallback);
  return t.get<TrainConfig>();
}

PoisonConfig poison_config(const json& cfg, std::uint64_t seed) {
  json p = section(cfg, "poison");
  if (!p.contains("seed")) p["seed"] = seed;
  return p.get<PoisonConfig>();
}

EvalReport base_report(const Model& m, const Dataset& d, std::uint64_t seed) {
  EvalReport r;
  r.variant = to_string(m.variant());
  r.split = d.split;
  r.sample_count = d.size();
  r.seed = seed;
  r.accuracy_clean = accuracy(m, d);
  return r;
}

void write_report(json& manifest, const fs::path& out, EvalReport& r) {
  r.validate();
  write_json(manifest, out, "report.json", "report", r);
}

void write_model(json& manifest, const fs::path& out, const std::string& rel, const Model& m) {
  save_checkpoint(m, out / rel);
  record(manifest, out, rel, "checkpoint");
}

void write_log(json& manifest, const fs::path& out, const std::string& rel, const TrainLog& log) {
  write_file(out / rel, log.to_jsonl());
  record(manifest, out, rel, "trainlog");
}

Model model_for(const json& cfg, std::uint64_t seed, const fs::path& out, json& manifest, Variant fallback) {
  json c = cfg;
  if (!c.contains("checkpoint")) {
    json t = section(c, "train");
    if (!t.contains("model")) t["model"] = json::object();
    if (!t["model"].contains("variant")) t["model"]["variant"] = to_string(fallback);
    c["train"] = t;
  }
  return obtain_model(c, seed, out, manifest);
}

void cmd_train(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const TrainConfig tc = train_config(cfg, seed, Variant::pipnet);
  const Dataset train = load_split(cfg, "train", seed);
  const Dataset test = load_split(cfg, "test", seed);
  TrainResult r = train_model(train, tc);
  manifest["train_config"] = tc;
  write_model(manifest, out, "checkpoint.bin", r.model);
  write_log(manifest, out, "trainlog.jsonl", r.log);
  EvalReport rep = base_report(r.model, test, seed);
  write_report(manifest, out, rep);
}

void cmd_evaluate(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const json ev = section(cfg, "evaluate");
  const Model m = obtain_model(cfg, seed, out, manifest);
  const Dataset d = load_split(cfg, ev.value("split", std::string("test")), seed);
  EvalReport rep = base_report(m, d, seed);
  if (ev.contains("reference")) {
    const Model ref = load_checkpoint(ev.at("reference").get<std::string>());
    const PoisonConfig pc = poison_config(cfg, seed);
    rep.accuracy_clean = accuracy(ref, d);
    rep.accuracy_attacked = accuracy(m, d);
    rep.asr = attack_success_rate(ref, m, d, pc);
    if (m.variant() == Variant::pipnet) {
      const AlignmentStats a = alignment_report(ref, m, d, pc);
      rep.align_no_trigger = a.no_trigger;
      rep.align_trigger = a.trigger;
    }
  }
  if (m.variant() == Variant::pipnet) {
    const Dataset ood = load_split(cfg, "ood", seed);
    for (int i = 1; i <= 9; ++i) rep.abstention_curve.emplace_back(i / 10.0, ood_abstention(m, ood, i / 10.0));
    rep.abstention_threshold = ev.value("abstention_threshold", 0.5);
    rep.abstention_rate = ood_abstention(m, ood, *rep.abstention_threshold);
    rep.abstention_rule = "max class score below threshold on the ood split (approximation of the PIP-Net OOD detector)";
  }
  write_report(manifest, out, rep);
}

struct Substitution {
  Model model;
  double approx_error;
  double accuracy_substituted;
  double accuracy_finetuned;
  TrainLog log;
  std::vector<int> substituted;
};

Substitution substitute_and_finetune(const Model& base, const Dataset& train, const Dataset& test, const Dataset& ood, double fraction,
                                     const json& sc, std::uint64_t seed) {
  const auto sub = partial_substitution(base, ood, fraction, seed);
  const double acc_sub = accuracy(sub.model, test);
  const TrainResult ft = finetune_last_layer(sub.model, train, sc.value("finetune_epochs", 6), sc.value("finetune_lr", 1e-2),
                                             sc.value("batch_size", 16), seed);
  return {ft.model, sub.approx_error, acc_sub, accuracy(ft.model, test), ft.log, sub.substituted};
}

void cmd_attack_substitute(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const json sc = section(cfg, "substitute");
  const Model base = model_for(cfg, seed, out, manifest, Variant::protovit);
  const Dataset train = load_split(cfg, "train", seed);
  const Dataset test = load_split(cfg, "test", seed);
  const Dataset ood = build_projection_set(load_split(cfg, "ood", seed), LabelMode::none);
  const double fraction = sc.value("fraction", 1.0);
  const Substitution s = substitute_and_finetune(base, train, test, ood, fraction, sc, seed);

  write_model(manifest, out, "checkpoint.bin", s.model);
  write_log(manifest, out, "trainlog.jsonl", s.log);
  write_json(manifest, out, "attack.json", "attack-metadata",
             {{"attack", "substitute"}, {"fraction", fraction}, {"seed", seed}, {"substituted", s.substituted},
              {"finetune_epochs", sc.value("finetune_epochs", 6)}, {"finetune_lr", sc.value("finetune_lr", 1e-2)},
              {"accuracy_before_finetune", s.accuracy_substituted}});
  EvalReport rep = base_report(base, test, seed);
  rep.accuracy_attacked = s.accuracy_finetuned;
  rep.approx_error = s.approx_error;
  write_report(manifest, out, rep);
}

void cmd_sweep(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const json sc = section(cfg, "substitute");
  const auto fractions = section(cfg, "sweep").value("fractions", std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  const Model base = model_for(cfg, seed, out, manifest, Variant::protovit);
  const Dataset train = load_split(cfg, "train", seed);
  const Dataset test = load_split(cfg, "test", seed);
  const Dataset ood = build_projection_set(load_split(cfg, "ood", seed), LabelMode::none);
  std::ostringstream csv;
  csv << std::setprecision(17) << "fraction,accuracy_before_finetune,accuracy_after_finetune,approx_error\n";
  for (double f : fractions) {
    const Substitution s = substitute_and_finetune(base, train, test, ood, f, sc, seed);
    csv << f << ',' << s.accuracy_substituted << ',' << s.accuracy_finetuned << ',' << s.approx_error << '\n';
  }
  write_file(out / "sweep.csv", csv.str());
  record(manifest, out, "sweep.csv", "sweep");
  EvalReport rep = base_report(base, test, seed);
  write_report(manifest, out, rep);
}

void cmd_attack_backdoor(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const json bc = section(cfg, "backdoor");
  const Model base = model_for(cfg, seed, out, manifest, Variant::pipnet);
  const Dataset train = load_split(cfg, "train", seed);
  const Dataset test = load_split(cfg, "test", seed);
  const PoisonConfig pc = poison_config(cfg, seed);
  const std::string preset = bc.value("preset", std::string("disguise"));
  const LossWeights w = bc.contains("weights") ? bc.at("weights").get<LossWeights>() : loss_preset(preset);
  BackdoorOptions opts;
  opts.seed = seed;
  from_json(bc, opts);
  const AttackState st = backdoor_finetune(base, train, pc, w, opts);

  write_model(manifest, out, "checkpoint.bin", st.attacked);
  write_log(manifest, out, "trainlog.jsonl", st.log);
  write_json(manifest, out, "attack.json", "attack-metadata",
             {{"attack", "backdoor"}, {"preset", preset}, {"seed", seed}, {"epochs", opts.epochs}, {"weights", w}, {"options", opts},
              {"poison", pc}});
  EvalReport rep = base_report(st.ref, test, seed);
  rep.accuracy_attacked = accuracy(st.attacked, test);
  rep.asr = attack_success_rate(st.ref, st.attacked, test, pc);
  const AlignmentStats a = alignment_report(st.ref, st.attacked, test, pc);
  rep.align_no_trigger = a.no_trigger;
  rep.align_trigger = a.trigger;
  write_report(manifest, out, rep);
}

void cmd_analyze(const json& cfg, const fs::path& out, json& manifest) {
  const std::uint64_t seed = seed_of(cfg);
  const json ac = section(cfg, "analysis");
  const Model m = obtain_model(cfg, seed, out, manifest);
  const Dataset d = load_split(cfg, ac.value("split", std::string("test")), seed);
  const int k = ac.value("k", 3);
  const int local_count = std::min<int>(ac.value("local_samples", 4), static_cast<int>(d.size()));
  const double bbox_threshold = ac.value("bbox_threshold", 0.5);
  const bool triggered = ac.value("triggered", false);
  fs::create_directories(out / "analysis");

  AnalysisArtifact global = global_analysis(m, d, k);
  render_global(global, d, out / "analysis" / "global.png");
  record(manifest, out, "analysis/global.png", "figure");
  write_json(manifest, out, "analysis/global.json", "analysis", global);

  AnalysisArtifact local;
  local.kind = "local";
  local.image_size = m.config.image_size;
  const PoisonConfig pc = poison_config(cfg, seed);
  for (int i = 0; i < local_count; ++i) {
    ImageSample x = d.samples[static_cast<std::size_t>(i)];
    if (triggered) {
      const auto [t, corner] = trigger_choice(pc, static_cast<std::size_t>(i));
      x = apply_trigger(x, pc.triggers[static_cast<std::size_t>(t)], corner);
    }
    LocalAnalysis l = local_analysis(m, x, k, bbox_threshold);
    const std::string name = "analysis/local_" + std::to_string(i) + ".png";
    render_local(l, x, out / name);
    record(manifest, out, name, "figure");
    local.images.push_back(fs::path(name).filename().string());
    local.local.push_back(std::move(l));
  }
  write_json(manifest, out, "analysis/local.json", "analysis", local);
}

}  // namespace

std::string usage() {
  std::string s = "usage: proto-lab <command> --config <path.json> --out <dir> [--seed N]\ncommands:";
  for (const auto& c : kCommands) s += " " + c;
  s += "\nenvironment: PROTOLAB_WORKERS worker count (computation is single-threaded; the value is recorded)\n";
  return s;
}

int worker_count() {
  const char* v = std::getenv("PROTOLAB_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError("PROTOLAB_WORKERS must be a positive integer");
  return static_cast<int>(n);
}

Dataset load_split(const json& cfg, const std::string& split, std::uint64_t seed) {
  const json data = section(cfg, "data");
  Dataset d;
  if (data.contains(split)) {
    const json& src = data.at(split);
    if (src.contains("folder")) {
      d = load_image_folder(src.at("folder").get<std::string>(), src.value("image_size", 32), split);
    } else if (src.contains("synthetic")) {
      SyntheticSpec spec = split == "ood" ? default_ood_spec(64, seed) : default_synthetic_spec(split, 64, seed);
      json merged = spec;
      merged.update(src.at("synthetic"));
      merged["split"] = split;
      d = generate_synthetic(merged.get<SyntheticSpec>());
    } else {
      throw ConfigError("data." + split + " needs 'synthetic' or 'folder'");
    }
  } else if (split == "ood") {
    d = generate_synthetic(default_ood_spec(64, seed));
  } else if (split == "train" || split == "test") {
    d = generate_synthetic(default_synthetic_spec(split, split == "train" ? 64 : 32, seed));
  } else {
    throw ConfigError("unknown split '" + split + "'");
  }
  d.validate();
  return d;
}

Model obtain_model(const json& cfg, std::uint64_t seed, const fs::path& out, json& manifest) {
  if (cfg.contains("checkpoint")) return load_checkpoint(cfg.at("checkpoint").get<std::string>());
  const TrainConfig tc = train_config(cfg, seed, Variant::pipnet);
  TrainResult r = train_model(load_split(cfg, "train", seed), tc);
  write_model(manifest, out, "base_checkpoint.bin", r.model);
  write_log(manifest, out, "base_trainlog.jsonl", r.log);
  return r.model;
}

void run_command(const std::string& command, json cfg, const fs::path& out) {
  if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end()) throw ConfigError("unknown command '" + command + "'");
  if (!cfg.is_object()) throw ConfigError("run config must be a JSON object");
  if (cfg.contains("checkpoint") && !fs::exists(cfg.at("checkpoint").get<std::string>()))
    throw ConfigError("checkpoint '" + cfg.at("checkpoint").get<std::string>() + "' does not exist");
  const int workers = worker_count();
  fs::create_directories(out);
  json manifest = {{"command", command}, {"seed", seed_of(cfg)}, {"workers", workers}, {"config", cfg}, {"artifacts", json::array()}};
  if (command == "train") cmd_train(cfg, out, manifest);
  else if (command == "evaluate") cmd_evaluate(cfg, out, manifest);
  else if (command == "attack-substitute") cmd_attack_substitute(cfg, out, manifest);
  else if (command == "attack-backdoor") cmd_attack_backdoor(cfg, out, manifest);
  else if (command == "analyze") cmd_analyze(cfg, out, manifest);
  else if (command == "sweep-fraction") cmd_sweep(cfg, out, manifest);
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace protolab::cli
