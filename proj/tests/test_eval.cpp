#include <gtest/gtest.h>

#include <random>

#include "protolab/eval.hpp"
#include "protolab/training.hpp"

using namespace protolab;

namespace {

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 6;
  c.num_prototypes = 4;
  c.token_count = v == Variant::protovit ? 2 : 1;
  c.seed = 41;
  return c;
}

ImageSample random_image(std::mt19937_64& rng, int label) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto x = ImageSample::zeros(3, 8, 8, label);
  for (Eigen::Index i = 0; i < x.pixels.size(); ++i) x.pixels.data()[i] = u(rng);
  return x;
}

PoisonConfig single_trigger(TriggerPatch t) {
  PoisonConfig c;
  c.triggers = {std::move(t)};
  c.corners = {Corner::top_left};
  return c;
}

TriggerPatch white4() {
  TriggerPatch t;
  t.name = "white";
  t.channels = 3;
  t.height = t.width = 4;
  t.pixels = Matrix<float>::Ones(12, 4);
  return t;
}

}  // namespace

TEST(Accuracy, Counting) {
  std::mt19937_64 rng(1);
  const auto m = init_model<float>(tiny(Variant::pipnet));
  Dataset d;
  d.class_names = {"a", "b"};
  for (int i = 0; i < 10; ++i) {
    auto x = random_image(rng, 0);
    x.label = predict(x, m);
    d.samples.push_back(x);
  }
  EXPECT_EQ(accuracy(m, d), 1.0);
  for (int i = 0; i < 3; ++i) d.samples[static_cast<std::size_t>(i)].label = 1 - d.samples[static_cast<std::size_t>(i)].label;
  EXPECT_DOUBLE_EQ(accuracy(m, d), 0.7);
  EXPECT_THROW(accuracy(m, Dataset{}), DataError);
}

TEST(Accuracy, ChanceLevelAndShuffleInvariant) {
  std::mt19937_64 rng(2);
  const auto m = init_model<float>(tiny(Variant::cbm));
  Dataset d;
  d.class_names = {"a", "b"};
  for (int i = 0; i < 400; ++i) d.samples.push_back(random_image(rng, i % 2));
  const double a = accuracy(m, d);
  EXPECT_NEAR(a, 0.5, 0.1);
  auto shuffled = d;
  std::shuffle(shuffled.samples.begin(), shuffled.samples.end(), rng);
  EXPECT_EQ(accuracy(m, shuffled), a);
}

TEST(AttackSuccessRate, ZeroAreaTriggerNeverFlips) {
  std::mt19937_64 rng(3);
  const auto m = init_model<float>(tiny(Variant::pipnet));
  Dataset d;
  for (int i = 0; i < 20; ++i) d.samples.push_back(random_image(rng, 0));
  TriggerPatch empty;
  empty.name = "empty";
  empty.pixels.resize(0, 0);
  EXPECT_EQ(attack_success_rate(m, m, d, single_trigger(empty)), 0.0);
}

TEST(AttackSuccessRate, Counting) {
  std::mt19937_64 rng(4);
  const auto m = init_model<float>(tiny(Variant::pipnet));
  const auto cfg = single_trigger(white4());
  std::vector<ImageSample> flips, stays;
  for (int i = 0; i < 5000 && (flips.size() < 10 || stays.empty()); ++i) {
    auto x = random_image(rng, 0);
    (predict(apply_trigger(x, cfg.triggers[0], Corner::top_left), m) != predict(x, m) ? flips : stays).push_back(x);
  }
  ASSERT_GE(flips.size(), 10u);
  ASSERT_FALSE(stays.empty());
  Dataset all;
  all.samples.assign(flips.begin(), flips.begin() + 10);
  EXPECT_EQ(attack_success_rate(m, m, all, cfg), 1.0);
  all.samples[4] = stays[0];
  EXPECT_DOUBLE_EQ(attack_success_rate(m, m, all, cfg), 0.9);
}

TEST(AlignmentReport, SelfBaseline) {
  // On an untrained model a trigger can sharpen the patch distributions enough to lower the
  // loss below the self-baseline, so this uses a trained one.
  const auto train = generate_synthetic(default_synthetic_spec("test", 8, 5));
  const auto m = train_model(generate_synthetic(default_synthetic_spec("train", 32, 5)), default_pipnet_config(5)).model;
  const auto cfg = default_poison_config(5);
  const auto stats = alignment_report(m, m, train, cfg);
  std::vector<double> self;
  for (const auto& x : train.samples) {
    const auto z = forward(x, m).per_patch;
    self.push_back(alignment_loss(z, z));
  }
  EXPECT_NEAR(stats.no_trigger.mean, mean_std(self).mean, 1e-9);
  EXPECT_GT(stats.no_trigger.mean, 0.0);
  EXPECT_GT(stats.trigger.mean, stats.no_trigger.mean);
  EXPECT_GT(stats.ratio(), 1.0);
}

TEST(OodAbstention, Thresholds) {
  std::mt19937_64 rng(6);
  const auto m = init_model<float>(tiny(Variant::pipnet));
  Dataset d;
  for (int i = 0; i < 20; ++i) d.samples.push_back(random_image(rng, 0));
  EXPECT_EQ(ood_abstention(m, d, 0.0), 0.0);
  double top = 0;
  for (const auto& x : d.samples) top = std::max(top, static_cast<double>(forward(x, m).scores.maxCoeff()));
  EXPECT_EQ(ood_abstention(m, d, top + 1.0), 1.0);
  EXPECT_THROW(ood_abstention(init_model<float>(tiny(Variant::cbm)), d, 0.5), ConfigError);
}

TEST(MeanStd, Population) {
  const auto s = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(1.25), 1e-15);
}

TEST(EvalReport, JsonRoundTripAndValidation) {
  EvalReport r;
  r.variant = "pipnet";
  r.split = "test";
  r.sample_count = 64;
  r.seed = 3;
  r.accuracy_clean = 0.96875;
  r.accuracy_attacked = 0.953125;
  r.asr = 0.9;
  r.align_no_trigger = MeanStd{1.25, 0.125};
  r.align_trigger = MeanStd{1.5, 0.25};
  r.approx_error = 0.1 + 0.2;
  r.abstention_rate = 0.0;
  r.abstention_threshold = 0.5;
  r.abstention_curve = {{0.1, 0.0}, {0.9, 1.0 / 3.0}};
  r.abstention_rule = "max class score below threshold";
  r.validate();
  const nlohmann::json j = r;
  EXPECT_EQ(j.at("schema_version"), kReportSchemaVersion);
  EXPECT_EQ(j.get<EvalReport>(), r);
  EXPECT_EQ(nlohmann::json::parse(j.dump()).get<EvalReport>(), r);
  const auto header = r.csv_header(), row = r.csv_row();
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));

  auto bad = r;
  bad.asr = 1.5;
  EXPECT_THROW(bad.validate(), InvariantViolation);
  bad = r;
  bad.sample_count = 0;
  EXPECT_THROW(bad.validate(), InvariantViolation);
}
