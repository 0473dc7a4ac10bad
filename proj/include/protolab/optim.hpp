#pragma once

#include <cmath>
#include <functional>
#include <numbers>

#include "protolab/model.hpp"

namespace protolab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay. Groups whose learning rate is <= 0 are
// skipped entirely, so frozen parameters stay bit-exact.
template <typename Scalar>
class AdamW {
 public:
  AdamW(const ModelParams<Scalar>& like, AdamWConfig cfg) : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {}

  void step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, const std::function<double(ParamGroup)>& lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    std::vector<Matrix<Scalar>*> ps, gs, ms, vs;
    std::vector<ParamGroup> groups;
    visit_params(params, [&](const std::string&, ParamGroup g, Matrix<Scalar>& m) {
      ps.push_back(&m);
      groups.push_back(g);
    });
    visit_params(const_cast<ModelParams<Scalar>&>(grads), [&](const std::string&, ParamGroup, Matrix<Scalar>& m) { gs.push_back(&m); });
    visit_params(m_, [&](const std::string&, ParamGroup, Matrix<Scalar>& m) { ms.push_back(&m); });
    visit_params(v_, [&](const std::string&, ParamGroup, Matrix<Scalar>& m) { vs.push_back(&m); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const double rate = lr(groups[i]);
      if (!(rate > 0)) continue;
      auto& p = *ps[i];
      const auto& g = *gs[i];
      auto& m = *ms[i];
      auto& v = *vs[i];
      const Scalar b1 = Scalar(cfg_.beta1), b2 = Scalar(cfg_.beta2);
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
      const Scalar step = Scalar(rate / c1);
      const Scalar denom_scale = Scalar(1.0 / std::sqrt(c2));
      p *= Scalar(1.0 - rate * cfg_.weight_decay);
      p -= step * m.cwiseQuotient(((v.array().sqrt() * denom_scale) + Scalar(cfg_.eps)).matrix());
    }
  }

 private:
  AdamWConfig cfg_;
  ModelParams<Scalar> m_, v_;
  int t_ = 0;
};

inline double cosine_annealing(double base, long step, long total) {
  if (total <= 1) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace protolab
