#pragma once

// Exhaustive-search references and tiny fixtures shared by the unit tests and
// the acceptance runner. Nothing here calls the matching code under test.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>
#include <vector>

#include "protolab/attacks.hpp"
#include "protolab/model.hpp"

namespace oracle {

using protolab::Matrix;

inline double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Every injective token -> patch map for t tokens over n patches.
inline std::vector<std::vector<int>> injective_maps(int t, int n) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(t));
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  auto rec = [&](auto&& self, int k) -> void {
    if (k == t) {
      out.push_back(cur);
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = 1;
      cur[static_cast<std::size_t>(k)] = j;
      self(self, k + 1);
      used[static_cast<std::size_t>(j)] = 0;
    }
  };
  rec(rec, 0);
  return out;
}

// Among all injective maps, the one whose chosen (token, patch) pairs, ordered
// by (cosine desc, patch asc, token asc), form the greatest sequence. This is
// the assignment a greedy "largest pair first" procedure must produce.
inline std::vector<int> greedy_by_enumeration(const Matrix<double>& cos) {
  const int t = static_cast<int>(cos.rows()), n = static_cast<int>(cos.cols());
  using Key = std::tuple<double, int, int>;  // (cos, -patch, -token): larger is preferred
  std::vector<int> best;
  std::vector<Key> best_keys;
  for (const auto& m : injective_maps(t, n)) {
    std::vector<Key> keys;
    for (int k = 0; k < t; ++k) keys.emplace_back(cos(k, m[static_cast<std::size_t>(k)]), -m[static_cast<std::size_t>(k)], -k);
    std::sort(keys.begin(), keys.end(), std::greater<>());
    if (best.empty() || keys > best_keys) {
      best = m;
      best_keys = keys;
    }
  }
  return best;
}

inline Matrix<double> cosine_table(const Matrix<double>& tokens, const Matrix<double>& z) {
  Matrix<double> c(tokens.rows(), z.rows());
  for (Eigen::Index k = 0; k < tokens.rows(); ++k)
    for (Eigen::Index j = 0; j < z.rows(); ++j) c(k, j) = cosine(tokens.row(k), z.row(j));
  return c;
}

inline double summed_cosine(const Matrix<double>& cos, const std::vector<int>& m) {
  double s = 0;
  for (std::size_t k = 0; k < m.size(); ++k) s += cos(static_cast<Eigen::Index>(k), m[k]);
  return s;
}

struct Pick {
  int sample = -1;
  std::vector<int> patches;
  double score = 0;
};

// Best (sample, greedy assignment) for one prototype over precomputed latents.
// `allowed[s]` filters candidates. Ties keep the lowest sample.
inline Pick best_pick(const Matrix<double>& proto, const std::vector<Matrix<double>>& latents, const std::vector<char>& allowed) {
  Pick best;
  for (std::size_t s = 0; s < latents.size(); ++s) {
    if (!allowed[s]) continue;
    const Matrix<double> c = cosine_table(proto, latents[s]);
    const std::vector<int> m = greedy_by_enumeration(c);
    const double score = summed_cosine(c, m);
    if (best.sample < 0 || score > best.score) best = {static_cast<int>(s), m, score};
  }
  return best;
}

// Random tiny ProtoViT instance: grid-2 encoder (4 patches), t <= 3, d_p <= 4, d_z <= 4.
struct TinyInstance {
  protolab::ModelParams<double> model;
  protolab::Dataset data;
};

inline TinyInstance random_instance(std::mt19937_64& rng, bool with_classes) {
  std::uniform_int_distribution<int> pick_t(1, 3), pick_dp(1, 4), pick_dz(2, 4), pick_n(with_classes ? 2 : 1, 4);
  protolab::ModelConfig cfg;
  cfg.variant = protolab::Variant::protovit;
  cfg.channels = 1;
  cfg.image_size = 2;
  cfg.patch_size = 1;
  cfg.embed_dim = pick_dz(rng);
  cfg.depth = 1;
  cfg.num_prototypes = pick_dp(rng);
  cfg.token_count = pick_t(rng);
  cfg.seed = rng();
  TinyInstance inst{protolab::init_model<double>(cfg), {}};
  if (!with_classes) inst.model.bank.class_assignment.reset();
  std::uniform_real_distribution<float> px(0.0f, 1.0f);
  const int n = pick_n(rng);
  inst.data.class_names = {"a", "b"};
  for (int s = 0; s < n; ++s) {
    auto x = protolab::ImageSample::zeros(1, 2, 2, s % 2);
    for (Eigen::Index i = 0; i < x.pixels.size(); ++i) x.pixels.data()[i] = px(rng);
    x.id = "s" + std::to_string(s);
    inst.data.samples.push_back(x);
  }
  return inst;
}

inline std::vector<Matrix<double>> latents_of(const protolab::ModelParams<double>& m, const protolab::Dataset& d) {
  std::vector<Matrix<double>> out;
  for (const auto& x : d.samples) out.push_back(protolab::encode(x, m).patches);
  return out;
}

// True when the code's choice agrees with the oracle, or both scores tie to
// within rounding (the two sum the same cosines in a different order).
inline bool same_pick(const Pick& want, int sample, const std::vector<int>& patches, double got_score) {
  if (want.sample == sample && want.patches == patches) return true;
  return std::abs(want.score - got_score) < 1e-9;
}

}  // namespace oracle
