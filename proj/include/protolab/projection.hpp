#pragma once

// Dataset-wide nearest-part search shared by prototype projection and
// prototype substitution.

#include <functional>
#include <span>
#include <vector>

#include "protolab/data.hpp"
#include "protolab/model.hpp"

namespace protolab {

template <typename Scalar>
struct BestMatch {
  Scalar score = 0;
  int sample = -1;
  std::vector<int> patches;
  Matrix<Scalar> tokens;  // [t x d_z] matched latent patches
};

// For each prototype in `prototypes`, the sample and greedy assignment with the
// largest summed cosine similarity over `d`. The running maximum keeps the
// first (lowest-index) sample on ties. `accept(i, x)` restricts the candidates
// for prototype i. Samples are encoded one at a time so the latent values are
// bit-identical to forward().
template <typename Scalar>
std::vector<BestMatch<Scalar>> best_matches(const ModelParams<Scalar>& theta, const Dataset& d, std::span<const int> prototypes,
                                            const std::function<bool(int, const ImageSample&)>& accept) {
  std::vector<BestMatch<Scalar>> best(prototypes.size());
  for (std::size_t s = 0; s < d.samples.size(); ++s) {
    const LatentMap<Scalar> zs = encode(d.samples[s], theta);
    for (std::size_t k = 0; k < prototypes.size(); ++k) {
      const int i = prototypes[k];
      if (!accept(i, d.samples[s])) continue;
      MatchAssignment a;
      a.indices.assign(static_cast<std::size_t>(theta.bank.size()), {});
      a.indices[static_cast<std::size_t>(i)] = greedy_match_one(zs, theta.bank, i);
      const Scalar score = similarity(theta.bank, i, zs, a);
      auto& b = best[k];
      if (b.sample < 0 || score > b.score) {
        b.score = score;
        b.sample = static_cast<int>(s);
        b.patches = a.indices[static_cast<std::size_t>(i)];
        b.tokens.resize(theta.bank.token_count, zs.patches.cols());
        for (int t = 0; t < theta.bank.token_count; ++t) b.tokens.row(t) = zs.patches.row(b.patches[static_cast<std::size_t>(t)]);
      }
    }
  }
  return best;
}

}  // namespace protolab
