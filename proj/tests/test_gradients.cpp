#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "protolab/attacks.hpp"
#include "fd_check.hpp"

using namespace protolab;
using namespace fd;

TEST(Grad, QuadraticToyIsExact) {
  const auto theta = init_model<double>(fd_config(Variant::pipnet));
  // loss = sum(bank^2) -> gradient 2*bank, zero elsewhere
  LossBuilder<double> build = [](Tape<double>&, const ModelVars<double>& v) { return ad::sum(ad::hadamard(v.bank, v.bank)); };
  const auto g = grad<double>(build, theta).grad;
  EXPECT_TRUE(g.bank.tokens.isApprox(2.0 * theta.bank.tokens, 1e-15));
  EXPECT_EQ(g.encoder.patch_w.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.head.weights.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Grad, ZeroWeightLossHasZeroGradient) {
  std::mt19937_64 rng(1);
  const auto cfg = fd_config(Variant::pipnet);
  const auto theta = init_model<double>(cfg);
  TwoViewBatch b;
  for (int i = 0; i < 2; ++i) {
    b.view_a.push_back(random_image(rng, 4, i));
    b.view_b.push_back(random_image(rng, 4, i));
    b.labels.push_back(i);
  }
  LossBuilder<double> build = [&](Tape<double>& t, const ModelVars<double>& v) {
    return pipnet_loss_graph(t, v, cfg, b, LossWeights{}).total;
  };
  const auto g = grad<double>(build, theta).grad;
  visit_params(g, [](const std::string& name, ParamGroup, const Matrix<double>& a) {
    EXPECT_EQ(a.cwiseAbs().maxCoeff(), 0.0) << name;
  });
}

TEST(Grad, NonFiniteLossIsNumericalError) {
  const auto theta = init_model<double>(fd_config(Variant::pipnet));
  LossBuilder<double> build = [](Tape<double>& t, const ModelVars<double>&) {
    return t.constant(Matrix<double>::Constant(1, 1, std::nan("")));
  };
  EXPECT_THROW(grad<double>(build, theta), NumericalError);
}

TEST(Grad, PipNetLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const auto cfg = fd_config(Variant::pipnet);
  auto theta = init_model<double>(cfg);
  lift_head(theta, rng);
  ASSERT_LE(parameter_count(theta), 2000u);
  TwoViewBatch b;
  for (int i = 0; i < 3; ++i) {
    b.view_a.push_back(random_image(rng, 4, i % 2));
    b.view_b.push_back(random_image(rng, 4, i % 2));
    b.labels.push_back(i % 2);
  }
  const auto w = loss_preset("train");
  LossBuilder<double> build = [&](Tape<double>& t, const ModelVars<double>& v) { return pipnet_loss_graph(t, v, cfg, b, w).total; };
  const auto r = finite_difference_check(build, theta);
  EXPECT_EQ(r.checked, parameter_count(theta));
  EXPECT_LT(r.worst_rel, 1e-4) << r.worst_name;
}

TEST(Grad, AdversarialLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto cfg = fd_config(Variant::pipnet);
  auto ref = init_model<double>(cfg);
  lift_head(ref, rng);
  auto cfg2 = cfg;
  cfg2.seed = 4;
  auto att = init_model<double>(cfg2);
  lift_head(att, rng);
  AttackBatch b;
  for (int i = 0; i < 2; ++i) b.clean.push_back(random_image(rng, 4, i));
  const auto trig = builtin_trigger("stripes", 3, 2);
  for (int i = 0; i < 2; ++i) {
    auto xt = apply_trigger(b.clean[static_cast<std::size_t>(i)], trig, Corner::top_right);
    xt.label = flip_label(xt.label);
    b.triggered.push_back(xt);
    b.source.push_back(i);
  }
  for (const char* preset : {"disguise", "redherring"}) {
    const auto w = loss_preset(preset);
    LossBuilder<double> build = [&](Tape<double>& t, const ModelVars<double>& v) {
      auto rv = bind_constant(t, ref);
      return adversarial_loss_graph(t, rv, v, cfg, b, w).total;
    };
    const auto r = finite_difference_check(build, att);
    EXPECT_EQ(r.checked, parameter_count(att));
    EXPECT_LT(r.worst_rel, 1e-4) << preset << " " << r.worst_name;
  }
}

TEST(Grad, CbmClassificationMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const auto cfg = fd_config(Variant::cbm);
  const auto theta = init_model<double>(cfg);
  std::vector<ImageSample> xs{random_image(rng, 4, 0), random_image(rng, 4, 1)};
  std::vector<int> ys{0, 1};
  LossBuilder<double> build = [&](Tape<double>& t, const ModelVars<double>& v) {
    return ad::nll_mean(training_probs(t, v, cfg, std::span<const ImageSample>(xs)), std::span<const int>(ys));
  };
  const auto r = finite_difference_check(build, theta);
  EXPECT_LT(r.worst_rel, 1e-4) << r.worst_name;
}

TEST(Grad, ProtoVitClassificationMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto cfg = fd_config(Variant::protovit);
  const auto theta = init_model<double>(cfg);
  std::vector<ImageSample> xs{random_image(rng, 4, 0), random_image(rng, 4, 1)};
  std::vector<int> ys{0, 1};
  LossBuilder<double> build = [&](Tape<double>& t, const ModelVars<double>& v) {
    return ad::nll_mean(training_probs(t, v, cfg, std::span<const ImageSample>(xs)), std::span<const int>(ys));
  };
  // The greedy assignment is piecewise constant; away from a switch the check is exact.
  const auto r = finite_difference_check(build, theta);
  EXPECT_LT(r.worst_rel, 1e-4) << r.worst_name;
}
