#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "protolab/eval.hpp"
#include "protolab/training.hpp"

using namespace protolab;

namespace {

bool bit_equal(const Matrix<float>& a, const Matrix<float>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

bool same_params(const Model& a, const Model& b, const std::function<bool(ParamGroup)>& which) {
  std::vector<std::pair<ParamGroup, const Matrix<float>*>> pa, pb;
  visit_params(a, [&](const std::string&, ParamGroup g, const Matrix<float>& m) { pa.emplace_back(g, &m); });
  visit_params(b, [&](const std::string&, ParamGroup g, const Matrix<float>& m) { pb.emplace_back(g, &m); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (which(pa[i].first) && !bit_equal(*pa[i].second, *pb[i].second)) return false;
  return true;
}

Dataset small_train(int per_class = 6) { return generate_synthetic(default_synthetic_spec("train", per_class, 3)); }

TrainConfig shrink(TrainConfig c) {
  c.model.embed_dim = 8;
  c.model.depth = 1;
  c.batch_size = 4;
  return c;
}

}  // namespace

TEST(TrainPipNet, ZeroEpochsReturnsInitialization) {
  auto cfg = shrink(default_pipnet_config(1));
  for (auto& s : cfg.stages) s.epochs = 0;
  const auto r = train_pipnet(small_train(), cfg);
  EXPECT_TRUE(same_params(r.model, init_model<float>(cfg.model), [](ParamGroup) { return true; }));
  EXPECT_TRUE(r.log.records.empty());
}

TEST(TrainPipNet, FrozenGroupsStayBitExactAndHeadNonnegative) {
  auto cfg = shrink(default_pipnet_config(2));
  ASSERT_GE(cfg.stages.size(), 2u);
  cfg.stages.resize(1);  // contrastive pretraining: head frozen
  cfg.stages[0].epochs = 1;
  const auto init = init_model<float>(cfg.model);
  const auto r = train_pipnet(small_train(), cfg);
  EXPECT_TRUE(bit_equal(r.model.head.weights, init.head.weights));
  EXPECT_FALSE(bit_equal(r.model.bank.tokens, init.bank.tokens));

  auto cfg2 = shrink(default_pipnet_config(2));
  cfg2.stages = {cfg2.stages[1]};  // head only
  cfg2.stages[0].epochs = 2;
  const auto r2 = train_pipnet(small_train(), cfg2);
  EXPECT_TRUE(same_params(r2.model, init, [](ParamGroup g) { return g != ParamGroup::head; }));
  EXPECT_GE(r2.model.head.weights.minCoeff(), 0.0f);
  EXPECT_FALSE(r2.model.head.bias.has_value());
}

TEST(TrainPipNet, ReproducibleLogs) {
  auto cfg = shrink(default_pipnet_config(4));
  for (auto& s : cfg.stages) s.epochs = std::min(s.epochs, 1);
  const auto a = train_pipnet(small_train(), cfg);
  const auto b = train_pipnet(small_train(), cfg);
  ASSERT_EQ(a.log.records.size(), b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    EXPECT_EQ(a.log.records[i].loss, b.log.records[i].loss);
    EXPECT_EQ(a.log.records[i].epoch, static_cast<int>(i));
  }
  EXPECT_TRUE(same_params(a.model, b.model, [](ParamGroup) { return true; }));
  EXPECT_GE(a.model.head.weights.minCoeff(), 0.0f);
}

TEST(TrainLog, JsonlRoundTripAndMonotoneEpochs) {
  auto cfg = shrink(default_cbm_config(5));
  cfg.stages[0].epochs = 3;
  const auto r = train_cbm(small_train(), cfg);
  const auto back = TrainLog::from_jsonl(r.log.to_jsonl());
  ASSERT_EQ(back.records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.records[i].epoch, static_cast<int>(i));
    EXPECT_EQ(back.records[i].loss, r.log.records[i].loss);
    EXPECT_EQ(back.records[i].terms, r.log.records[i].terms);
  }
  EXPECT_THROW(TrainLog::from_jsonl(R"({"stage":"a","epoch":1,"stage_epoch":0,"loss":0,"terms":{},"accuracy":0,"wall_seconds":0}
{"stage":"a","epoch":1,"stage_epoch":1,"loss":0,"terms":{},"accuracy":0,"wall_seconds":0})"),
               DataError);
}

TEST(TrainConfig, RejectsBadValues) {
  auto cfg = default_pipnet_config(0);
  cfg.stages[0].epochs = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_pipnet_config(0);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = default_pipnet_config(0);
  for (auto& [g, lr] : cfg.stages[0].lr) lr = -1e-3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const auto ok = default_pipnet_config(0);
  int total = 0;
  for (const auto& s : ok.stages) total += s.epochs;
  EXPECT_LE(total, 20);
}

TEST(TrainConfig, JsonRoundTrip) {
  for (Variant v : {Variant::pipnet, Variant::protovit, Variant::cbm}) {
    const auto c = default_train_config(v, 9);
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  }
}

TEST(TrainProtoVit, ProjectionOnceThenFrozenPrototypes) {
  auto cfg = shrink(default_protovit_config(6));
  for (auto& s : cfg.stages)
    if (s.kind == "train") s.epochs = 1;
  const auto d = small_train();
  const auto r = train_protovit(d, cfg);
  int projections = 0;
  for (const auto& s : cfg.stages) projections += s.kind == "project";
  EXPECT_EQ(projections, 1);
  const auto& bank = r.model.bank;
  for (int i = 0; i < bank.size(); ++i) {
    const auto& prov = bank.provenance[static_cast<std::size_t>(i)];
    ASSERT_TRUE(prov.has_value());
    const auto& x = d.samples[static_cast<std::size_t>(prov->sample_index)];
    EXPECT_EQ(x.id, prov->sample_id);
    EXPECT_EQ(x.label, (*bank.class_assignment)[static_cast<std::size_t>(i)]);
    // The projected tokens are copies of the source patches, so the similarity
    // to those exact patches is t.
    const auto z = encode(x, r.model);
    MatchAssignment a;
    a.indices.assign(static_cast<std::size_t>(bank.size()), {});
    a.indices[static_cast<std::size_t>(i)] = prov->patch_indices;
    EXPECT_NEAR(similarity(bank, i, z, a), static_cast<float>(bank.token_count), 1e-5);
  }
}

TEST(ProjectPrototypes, Idempotent) {
  auto cfg = shrink(default_protovit_config(7));
  const auto m = init_model<float>(cfg.model);
  const auto d = small_train(4);
  const auto once = project_prototypes(m, d);
  const auto twice = project_prototypes(once, d);
  EXPECT_TRUE(bit_equal(once.bank.tokens, twice.bank.tokens));
  EXPECT_TRUE(same_params(once, m, [](ParamGroup g) { return g != ParamGroup::prototypes; }));
}

TEST(ProjectPrototypes, SingleSampleTakesEverything) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    auto inst = oracle::random_instance(rng, false);
    Dataset one;
    one.class_names = inst.data.class_names;
    one.samples = {inst.data.samples[0]};
    const auto out = project_prototypes(inst.model, one);
    for (const auto& p : out.bank.provenance) {
      ASSERT_TRUE(p.has_value());
      EXPECT_EQ(p->sample_index, 0);
    }
  }
}

TEST(ProjectPrototypes, MissingClassIsProjectionError) {
  auto cfg = shrink(default_protovit_config(9));
  const auto m = init_model<float>(cfg.model);
  auto d = small_train(2);
  std::erase_if(d.samples, [](const ImageSample& x) { return x.label == 1; });
  try {
    project_prototypes(m, d);
    FAIL() << "expected ProjectionError";
  } catch (const ProjectionError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
  }
  EXPECT_THROW(project_prototypes(init_model<float>(shrink(default_pipnet_config(0)).model), d), ConfigError);
}

TEST(ProjectPrototypes, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(10);
  int checked = 0;
  while (checked < 250) {
    auto inst = oracle::random_instance(rng, true);
    const auto out = project_prototypes(inst.model, inst.data);
    const auto latents = oracle::latents_of(inst.model, inst.data);
    const auto& bank = inst.model.bank;
    for (int i = 0; i < bank.size(); ++i) {
      const int c = (*bank.class_assignment)[static_cast<std::size_t>(i)];
      std::vector<char> allowed;
      for (const auto& x : inst.data.samples) allowed.push_back(x.label == c);
      const auto want = oracle::best_pick(bank.prototype(i), latents, allowed);
      const auto& prov = *out.bank.provenance[static_cast<std::size_t>(i)];
      const double got = oracle::summed_cosine(oracle::cosine_table(bank.prototype(i), latents[static_cast<std::size_t>(prov.sample_index)]),
                                               prov.patch_indices);
      EXPECT_TRUE(oracle::same_pick(want, prov.sample_index, prov.patch_indices, got));
      for (int k = 0; k < bank.token_count; ++k)
        EXPECT_EQ(out.bank.prototype(i).row(k),
                  latents[static_cast<std::size_t>(prov.sample_index)].row(prov.patch_indices[static_cast<std::size_t>(k)]));
    }
    ++checked;
  }
}

TEST(FinetuneLastLayer, ZeroEpochsIdentityAndFrozenBody) {
  auto cfg = shrink(default_protovit_config(11));
  const auto m = init_model<float>(cfg.model);
  const auto d = small_train(4);
  const auto same = finetune_last_layer(m, d, 0, 1e-2, 4, 0);
  EXPECT_TRUE(same_params(same.model, m, [](ParamGroup) { return true; }));
  const auto tuned = finetune_last_layer(m, d, 2, 1e-2, 4, 0);
  EXPECT_TRUE(same_params(tuned.model, m, [](ParamGroup g) { return g != ParamGroup::head; }));
  EXPECT_FALSE(bit_equal(tuned.model.head.weights, m.head.weights));
}

TEST(FinetuneLastLayer, RecoversPermutedHead) {
  const auto train = generate_synthetic(default_synthetic_spec("train", 32, 12));
  const auto test = generate_synthetic(default_synthetic_spec("test", 32, 13));
  const auto trained = train_model(train, default_protovit_config(12)).model;
  const double base = accuracy(trained, test);
  auto permuted = trained;
  const auto& w = trained.head.weights;
  for (Eigen::Index i = 0; i < w.rows(); ++i) permuted.head.weights.row(i) = w.row((i + 1) % w.rows());
  const auto fixed = finetune_last_layer(permuted, train, 20, 5e-2, 16, 12).model;
  EXPECT_GE(accuracy(fixed, test), base - 0.02) << "base " << base;
}

TEST(TrainPipNet, DeskSetReachesTrainAccuracy) {
  // 64 samples, default schedule.
  const auto train = generate_synthetic(default_synthetic_spec("train", 32, 0));
  const auto r = train_model(train, default_pipnet_config(0));
  EXPECT_GE(accuracy(r.model, train), 0.95);
}

TEST(TrainProtoVit, DeskSetReachesTestAccuracy) {
  const auto train = generate_synthetic(default_synthetic_spec("train", 64, 1));
  const auto test = generate_synthetic(default_synthetic_spec("test", 32, 1));
  EXPECT_GE(accuracy(train_model(train, default_protovit_config(1)).model, test), 0.90);
}
