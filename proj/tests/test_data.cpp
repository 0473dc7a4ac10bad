#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "protolab/image_io.hpp"
#include "protolab/losses.hpp"
#include "protolab/training.hpp"

using namespace protolab;
namespace fs = std::filesystem;

namespace {

bool bit_equal(const ImageSample& a, const ImageSample& b) {
  return a.pixels.rows() == b.pixels.rows() && a.pixels.cols() == b.pixels.cols() &&
         std::memcmp(a.pixels.data(), b.pixels.data(), sizeof(float) * a.pixels.size()) == 0;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protolab_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Synthetic, EmptyCountIsError) {
  try {
    generate_synthetic(default_synthetic_spec("train", 0, 1));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("empty dataset"), std::string::npos);
  }
}

TEST(Synthetic, DeterministicBalancedInRange) {
  const auto a = generate_synthetic(default_synthetic_spec("train", 16, 7));
  const auto b = generate_synthetic(default_synthetic_spec("train", 16, 7));
  ASSERT_EQ(a.size(), 32u);
  std::map<int, int> counts;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(bit_equal(a.samples[i], b.samples[i]));
    EXPECT_EQ(a.samples[i].label, b.samples[i].label);
    EXPECT_GE(a.samples[i].pixels.minCoeff(), 0.0f);
    EXPECT_LE(a.samples[i].pixels.maxCoeff(), 1.0f);
    ++counts[a.samples[i].label];
  }
  EXPECT_EQ(counts[0], 16);
  EXPECT_EQ(counts[1], 16);
  a.validate();
}

TEST(Synthetic, SplitsAreDisjoint) {
  const auto train = generate_synthetic(default_synthetic_spec("train", 16, 7));
  const auto test = generate_synthetic(default_synthetic_spec("test", 16, 7));
  const auto ood = generate_synthetic(default_ood_spec(16, 7));
  auto key = [](const ImageSample& x) { return fnv1a(x.pixels.data(), sizeof(float) * static_cast<std::size_t>(x.pixels.size())); };
  std::set<std::uint64_t> seen;
  for (const auto* d : {&train, &test, &ood})
    for (const auto& x : d->samples) EXPECT_TRUE(seen.insert(key(x)).second) << x.id;
  std::set<std::string> ids;
  for (const auto* d : {&train, &test, &ood})
    for (const auto& x : d->samples) EXPECT_TRUE(ids.insert(d->split + x.id).second);
}

TEST(Synthetic, JsonSpecRoundTrip) {
  const auto s = default_ood_spec(5, 3);
  const nlohmann::json j = s;
  EXPECT_EQ(nlohmann::json(j.get<SyntheticSpec>()), j);
  auto bad = default_synthetic_spec("train", 4, 1);
  bad.classes[0].size_max = 40;
  EXPECT_THROW(generate_synthetic(bad), ConfigError);
}

TEST(ImageFolder, TwoClassesThreeImages) {
  const auto root = scratch_dir("folder");
  for (const char* cls : {"alpha", "beta"}) {
    fs::create_directories(root / cls);
    for (int i = 0; i < 3; ++i) {
      auto x = ImageSample::zeros(3, 12, 12);
      x.pixels.setConstant(static_cast<float>(i) / 4.0f);
      write_png(root / cls / ("img" + std::to_string(i) + ".png"), x);
    }
  }
  const auto d = load_image_folder(root, 8);
  ASSERT_EQ(d.size(), 6u);
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"alpha", "beta"}));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(d.samples[i].label, static_cast<int>(i / 3));
    EXPECT_EQ(d.samples[i].height, 8);
  }
  const auto again = load_image_folder(root, 8);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(again.samples[i].id, d.samples[i].id);
    EXPECT_TRUE(bit_equal(again.samples[i], d.samples[i]));
  }
  fs::create_directories(root / "gamma");
  EXPECT_THROW(load_image_folder(root, 8), DataError);
  fs::remove(root / "gamma");
  {
    std::ofstream junk(root / "alpha" / "broken.png");
    junk << "not a png";
  }
  try {
    load_image_folder(root, 8);
    FAIL() << "expected an error for the unreadable file";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("broken.png"), std::string::npos);
  }
  EXPECT_THROW(load_image_folder(root / "missing", 8), DataError);
  fs::remove_all(root);
}

TEST(ImageFolder, WriteThenLoadPreservesLabels) {
  const auto root = scratch_dir("roundtrip");
  const auto d = generate_synthetic(default_synthetic_spec("train", 6, 2));
  write_image_folder(d, root / "set");
  EXPECT_TRUE(fs::exists(root / "set" / "manifest.json"));
  const auto back = load_image_folder(root / "set", d.samples[0].height);
  ASSERT_EQ(back.size(), d.size());
  EXPECT_EQ(back.class_names, d.class_names);
  // Pixels survive 8-bit quantization; match every loaded image to its source.
  std::multiset<int> want, got;
  for (const auto& x : d.samples) want.insert(x.label);
  for (const auto& y : back.samples) {
    got.insert(y.label);
    bool found = false;
    for (const auto& x : d.samples)
      if (x.label == y.label && (x.pixels - y.pixels).cwiseAbs().maxCoeff() <= 0.5f / 255.0f + 1e-6f) found = true;
    EXPECT_TRUE(found) << y.id;
  }
  EXPECT_EQ(want, got);
  fs::remove_all(root);
}

TEST(Augmentation, EmptyPolicyGivesIdenticalCopies) {
  const auto d = generate_synthetic(default_synthetic_spec("train", 2, 1));
  const auto [a, b] = two_views(d.samples[0], AugmentationPolicy{}, 0);
  EXPECT_TRUE(bit_equal(a, d.samples[0]));
  EXPECT_TRUE(bit_equal(b, d.samples[0]));
}

TEST(Augmentation, DeterministicShapePreservingInRange) {
  const auto d = generate_synthetic(default_synthetic_spec("train", 4, 1));
  for (const auto& policy : {pipnet_augmentation(3), protovit_augmentation(3)}) {
    EXPECT_FALSE(policy.empty());
    int differing = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto [a, b] = two_views(d.samples[i], policy, i);
      const auto [a2, b2] = two_views(d.samples[i], policy, i);
      EXPECT_TRUE(bit_equal(a, a2));
      EXPECT_TRUE(bit_equal(b, b2));
      for (const auto* v : {&a, &b}) {
        EXPECT_EQ(v->height, d.samples[i].height);
        EXPECT_EQ(v->width, d.samples[i].width);
        EXPECT_EQ(v->channels, d.samples[i].channels);
        EXPECT_EQ(v->label, d.samples[i].label);
        EXPECT_GE(v->pixels.minCoeff(), 0.0f);
        EXPECT_LE(v->pixels.maxCoeff(), 1.0f);
      }
      differing += !bit_equal(a, b);
    }
    EXPECT_GT(differing, 0);
  }
}

TEST(Augmentation, SameImageViewsAlignBetterThanDifferentImages) {
  const auto train = generate_synthetic(default_synthetic_spec("train", 32, 4));
  const auto m = train_model(train, default_pipnet_config(4)).model;
  const auto pool = generate_synthetic(default_synthetic_spec("test", 50, 5));
  const auto policy = pipnet_augmentation(9);
  double same = 0, different = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& x = pool.samples[i];
    const auto& y = pool.samples[(i + 37) % pool.size()];
    const auto [a, b] = two_views(x, policy, i);
    const auto [c, e] = two_views(y, policy, i + 1000);
    same += alignment_loss(forward(a, m).per_patch, forward(b, m).per_patch);
    different += alignment_loss(forward(a, m).per_patch, forward(e, m).per_patch);
  }
  EXPECT_LE(same / 100.0, different / 100.0);
}

TEST(ProjectionSet, LabelModes) {
  const auto d = generate_synthetic(default_synthetic_spec("train", 10, 1));
  const auto keep = build_projection_set(d, LabelMode::keep);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(keep.samples[i].label, d.samples[i].label);
  const auto none = build_projection_set(d, LabelMode::none);
  for (const auto& x : none.samples) EXPECT_EQ(x.label, kNoLabel);
  const auto r1 = build_projection_set(d, LabelMode::random, 5, 2);
  const auto r2 = build_projection_set(d, LabelMode::random, 5, 2);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(r1.samples[i].label, r2.samples[i].label);
    EXPECT_TRUE(r1.samples[i].label == 0 || r1.samples[i].label == 1);
  }
}

TEST(Substream, IndependentOfOrder) {
  auto a = substream(1, 2, 3);
  auto b = substream(1, 2, 3);
  EXPECT_EQ(a(), b());
  EXPECT_NE(substream(1, 2, 3)(), substream(1, 2, 4)());
  EXPECT_NE(substream(1, 2, 3)(), substream(1, 3, 3)());
}
