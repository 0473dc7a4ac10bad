#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "commands.hpp"
#include "protolab/analysis.hpp"
#include "protolab/checkpoint.hpp"

using namespace protolab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protolab_report_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

Model small_model(Variant v, std::uint64_t seed) {
  ModelConfig c;
  c.variant = v;
  c.embed_dim = 8;
  c.num_prototypes = 5;
  c.token_count = v == Variant::protovit ? 2 : 1;
  c.seed = seed;
  return init_model<float>(c);
}

// A run config small enough for unit tests: 8 images per class, one epoch per stage.
json quick_config(const std::string& variant) {
  auto tc = default_train_config(variant_from_string(variant), 3);
  tc.model.embed_dim = 8;
  tc.model.depth = 1;
  for (auto& s : tc.stages)
    if (s.kind == "train") s.epochs = 1;
  json cfg;
  cfg["seed"] = 3;
  cfg["train"] = tc;
  cfg["data"]["train"]["synthetic"] = {{"count_per_class", 8}};
  cfg["data"]["test"]["synthetic"] = {{"count_per_class", 4}};
  cfg["data"]["ood"]["synthetic"] = {{"count_per_class", 4}};
  return cfg;
}

}  // namespace

TEST(HeatmapToBbox, Examples) {
  Matrix<double> single = Matrix<double>::Zero(4, 4);
  single(1, 2) = 1.0;
  EXPECT_EQ(heatmap_to_bbox(single, 0.5, 8), (Rect{16, 8, 24, 16}));
  EXPECT_EQ(heatmap_to_bbox(Matrix<double>::Constant(4, 4, 0.3), 0.5, 8), (Rect{0, 0, 32, 32}));
  Matrix<double> corners = Matrix<double>::Zero(4, 4);
  corners(0, 0) = corners(3, 3) = 1.0;
  EXPECT_EQ(heatmap_to_bbox(corners, 0.5, 8), (Rect{0, 0, 32, 32}));
  Matrix<double> two = Matrix<double>::Zero(4, 4);
  two(0, 1) = 1.0;
  two(2, 1) = 0.6;
  EXPECT_EQ(heatmap_to_bbox(two, 0.5, 8), (Rect{8, 0, 16, 24}));
  EXPECT_EQ(heatmap_to_bbox(two, 0.7, 8), (Rect{8, 0, 16, 8}));
}

TEST(TriggerPixels, CountsOnlyPresentTriggers) {
  const auto cfg = default_poison_config(0);
  auto x = ImageSample::zeros(3, 32, 32);
  x.pixels.setConstant(0.5f);
  EXPECT_EQ(trigger_pixels_in(x, Rect{0, 0, 32, 32}, cfg), 0);
  const auto xt = apply_trigger(x, cfg.triggers[1], Corner::bottom_left);
  EXPECT_EQ(trigger_pixels_in(xt, Rect{0, 0, 32, 32}, cfg), 64);
  EXPECT_EQ(trigger_pixels_in(xt, Rect{0, 28, 4, 32}, cfg), 16);
  EXPECT_EQ(trigger_pixels_in(xt, Rect{8, 0, 32, 24}, cfg), 0);
}

TEST(GlobalAnalysis, ProjectedModelFindsItsProvenance) {
  auto m = small_model(Variant::protovit, 1);
  const auto d = generate_synthetic(default_synthetic_spec("train", 4, 1));
  m = project_prototypes(m, d);
  const auto a = global_analysis(m, d, 1);
  ASSERT_EQ(a.global.size(), 5u);
  for (const auto& e : a.global) {
    const auto& prov = *m.bank.provenance[static_cast<std::size_t>(e.prototype)];
    ASSERT_EQ(e.matches.size(), 1u);
    EXPECT_EQ(e.matches[0].sample_index, prov.sample_index);
    EXPECT_EQ(e.matches[0].patches, prov.patch_indices);
    EXPECT_NEAR(e.matches[0].score, 2.0, 1e-5);
  }
}

TEST(GlobalAnalysis, SortedAndInBounds) {
  for (Variant v : {Variant::pipnet, Variant::protovit}) {
    const auto m = small_model(v, 2);
    const auto d = generate_synthetic(default_synthetic_spec("test", 3, 2));
    const auto a = global_analysis(m, d, 4);
    for (const auto& e : a.global) {
      ASSERT_EQ(e.matches.size(), 4u);
      for (std::size_t k = 1; k < e.matches.size(); ++k) EXPECT_GE(e.matches[k - 1].score, e.matches[k].score);
      for (const auto& mt : e.matches)
        for (std::size_t r = 0; r < mt.rects.size(); ++r) {
          EXPECT_GE(mt.patches[r], 0);
          EXPECT_LT(mt.patches[r], m.config.num_patches());
          EXPECT_EQ(mt.rects[r], patch_rect(mt.patches[r], m.config));
          EXPECT_GE(mt.rects[r].x0, 0);
          EXPECT_LE(mt.rects[r].x1, 32);
          EXPECT_LE(mt.rects[r].y1, 32);
        }
    }
  }
  EXPECT_THROW(global_analysis(small_model(Variant::cbm, 1), generate_synthetic(default_synthetic_spec("test", 1, 1)), 1),
               ConfigError);
}

TEST(LocalAnalysis, ContributionsDecomposeClassScore) {
  for (Variant v : {Variant::pipnet, Variant::protovit}) {
    const auto m = small_model(v, 3);
    const auto d = generate_synthetic(default_synthetic_spec("test", 3, 3));
    for (const auto& x : d.samples) {
      const auto l = local_analysis(m, x, m.bank.size());
      double sum = 0;
      for (const auto& e : l.by_contribution) sum += e.contribution;
      EXPECT_NEAR(sum, l.class_score, 1e-5);
      EXPECT_EQ(l.prediction, predict(x, m));
      ASSERT_EQ(l.by_contribution.size(), static_cast<std::size_t>(m.bank.size()));
      ASSERT_EQ(l.by_similarity.size(), l.by_contribution.size());
      for (std::size_t k = 1; k < l.by_similarity.size(); ++k) {
        EXPECT_GE(l.by_similarity[k - 1].similarity, l.by_similarity[k].similarity);
        EXPECT_GE(l.by_contribution[k - 1].contribution, l.by_contribution[k].contribution);
      }
      EXPECT_FALSE(l.bbox.empty());
      const auto top3 = local_analysis(m, x, 3);
      EXPECT_EQ(top3.by_contribution.size(), 3u);
    }
  }
}

TEST(Artifacts, JsonRoundTripAndRenderingIsPure) {
  const auto dir = scratch_dir("artifact");
  const auto m = small_model(Variant::pipnet, 4);
  const auto d = generate_synthetic(default_synthetic_spec("test", 2, 4));
  auto g = global_analysis(m, d, 2);
  const json before = g;
  render_global(g, d, dir / "global.png");
  EXPECT_TRUE(fs::exists(dir / "global.png"));
  json after = g;
  after["images"] = json::array();
  EXPECT_EQ(after, before);
  const json j = g;
  EXPECT_EQ(json(j.get<AnalysisArtifact>()), j);

  AnalysisArtifact local;
  local.kind = "local";
  local.local.push_back(local_analysis(m, d.samples[0], 3));
  render_local(local.local[0], d.samples[0], dir / "local.png");
  EXPECT_TRUE(fs::exists(dir / "local.png"));
  const json lj = local;
  EXPECT_EQ(json(lj.get<AnalysisArtifact>()), lj);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto dir = scratch_dir("ckpt");
  for (Variant v : {Variant::pipnet, Variant::protovit, Variant::cbm}) {
    auto m = small_model(v, 5);
    if (v == Variant::protovit) m = project_prototypes(m, generate_synthetic(default_synthetic_spec("train", 2, 5)));
    save_checkpoint(m, dir / "m.bin");
    const auto back = load_checkpoint(dir / "m.bin");
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
    EXPECT_EQ(back.variant(), v);
    if (v == Variant::protovit) {
      EXPECT_EQ(back.bank.class_assignment, m.bank.class_assignment);
      EXPECT_EQ(back.bank.provenance[0]->sample_id, m.bank.provenance[0]->sample_id);
    }
  }
  EXPECT_THROW(deserialize_checkpoint("PLCKjunk"), Error);
  fs::remove_all(dir);
}

TEST(Cli, UnknownCommandAndBadConfig) {
  const auto dir = scratch_dir("cli_bad");
  EXPECT_THROW(cli::run_command("no-such-command", json::object(), dir), ConfigError);
  EXPECT_THROW(cli::run_command("train", json::array(), dir), ConfigError);
  EXPECT_THROW(cli::run_command("evaluate", json{{"checkpoint", (dir / "missing.bin").string()}}, dir), ConfigError);
  EXPECT_NE(cli::usage().find("sweep-fraction"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, TrainThenEvaluateReproducesFinalAccuracy) {
  const auto dir = scratch_dir("cli_train");
  auto cfg = quick_config("pipnet");
  cli::run_command("train", cfg, dir / "train");
  const auto manifest = read_json(dir / "train" / "manifest.json");
  std::set<std::string> paths;
  for (const auto& a : manifest.at("artifacts")) {
    EXPECT_TRUE(paths.insert(a.at("path").get<std::string>()).second);
    EXPECT_TRUE(fs::exists(dir / "train" / a.at("path").get<std::string>()));
  }
  EXPECT_EQ(paths, (std::set<std::string>{"checkpoint.bin", "trainlog.jsonl", "report.json"}));
  std::ifstream logf(dir / "train" / "trainlog.jsonl");
  const std::string text((std::istreambuf_iterator<char>(logf)), std::istreambuf_iterator<char>());
  const auto log = TrainLog::from_jsonl(text);
  ASSERT_FALSE(log.records.empty());

  json ev = cfg;
  ev.erase("train");
  ev["checkpoint"] = (dir / "train" / "checkpoint.bin").string();
  ev["evaluate"] = {{"split", "train"}};
  cli::run_command("evaluate", ev, dir / "eval");
  const auto rep = read_json(dir / "eval" / "report.json");
  EXPECT_NEAR(rep.at("accuracy_clean").get<double>(), log.records.back().accuracy, 1e-6);
  EXPECT_EQ(rep.at("schema_version"), kReportSchemaVersion);
  EXPECT_EQ(rep.at("abstention_curve").size(), 9u);
  fs::remove_all(dir);
}

TEST(Cli, SweepAndAnalyzeWriteTheirArtifacts) {
  const auto dir = scratch_dir("cli_sweep");
  auto cfg = quick_config("protovit");
  cfg["substitute"] = {{"finetune_epochs", 1}};
  cli::run_command("sweep-fraction", cfg, dir / "sweep");
  std::ifstream in(dir / "sweep" / "sweep.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0], "fraction,accuracy_before_finetune,accuracy_after_finetune,approx_error");
  EXPECT_EQ(lines[1].substr(0, 2), "0,");

  json an = cfg;
  an["analysis"] = {{"k", 2}, {"local_samples", 2}};
  cli::run_command("analyze", an, dir / "analyze");
  const auto manifest = read_json(dir / "analyze" / "manifest.json");
  std::set<std::string> paths;
  for (const auto& a : manifest.at("artifacts")) EXPECT_TRUE(paths.insert(a.at("path").get<std::string>()).second);
  for (const char* p : {"analysis/global.json", "analysis/global.png", "analysis/local.json", "analysis/local_0.png", "analysis/local_1.png"})
    EXPECT_TRUE(paths.count(p)) << p;
  const auto global = read_json(dir / "analyze" / "analysis" / "global.json").get<AnalysisArtifact>();
  EXPECT_EQ(global.global.size(), 10u);
  fs::remove_all(dir);
}
