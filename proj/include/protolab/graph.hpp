#pragma once

// Batched forward passes recorded on a Tape, used by training and attacks.
// Every op mirrors the plain forward in model.hpp.

#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protolab/autodiff.hpp"
#include "protolab/model.hpp"

namespace protolab {

template <typename Scalar>
struct ModelVars {
  struct Block {
    Var<Scalar> mix, chan_w, chan_b;
  };
  Var<Scalar> patch_w, patch_b, pos;
  std::vector<Block> blocks;
  Var<Scalar> bank;
  Var<Scalar> concept_w, concept_b;
  Var<Scalar> head_w;
  std::optional<Var<Scalar>> head_b;
  // Visit order of visit_params(); used to read gradients back.
  std::vector<std::pair<std::string, Var<Scalar>>> named;
};

// Records every parameter as a leaf. `trainable(group)` decides which leaves
// carry gradients; the rest are constants.
template <typename Scalar>
ModelVars<Scalar> bind(Tape<Scalar>& tape, const ModelParams<Scalar>& params,
                       const std::function<bool(ParamGroup)>& trainable) {
  ModelVars<Scalar> v;
  std::map<std::string, Var<Scalar>> by_name;
  visit_params(const_cast<ModelParams<Scalar>&>(params), [&](const std::string& name, ParamGroup g, Matrix<Scalar>& m) {
    Var<Scalar> var = trainable(g) ? tape.variable(m) : tape.constant(m);
    by_name.emplace(name, var);
    v.named.emplace_back(name, var);
  });
  v.patch_w = by_name.at("encoder.patch_w");
  v.patch_b = by_name.at("encoder.patch_b");
  v.pos = by_name.at("encoder.pos");
  for (std::size_t b = 0; b < params.encoder.blocks.size(); ++b) {
    const std::string prefix = "encoder.block" + std::to_string(b);
    v.blocks.push_back({by_name.at(prefix + ".mix"), by_name.at(prefix + ".chan_w"), by_name.at(prefix + ".chan_b")});
  }
  if (params.variant() == Variant::cbm) {
    v.concept_w = by_name.at("concepts.weights");
    v.concept_b = by_name.at("concepts.bias");
  } else {
    v.bank = by_name.at("bank.tokens");
  }
  v.head_w = by_name.at("head.weights");
  if (params.head.bias) v.head_b = by_name.at("head.bias");
  return v;
}

template <typename Scalar>
ModelVars<Scalar> bind_constant(Tape<Scalar>& tape, const ModelParams<Scalar>& params) {
  return bind(tape, params, [](ParamGroup) { return false; });
}

template <typename Scalar>
ModelVars<Scalar> bind_trainable(Tape<Scalar>& tape, const ModelParams<Scalar>& params) {
  return bind(tape, params, [](ParamGroup) { return true; });
}

// Copies the gradients of the bound leaves into a parameter-shaped container.
template <typename Scalar>
ModelParams<Scalar> collect_grads(const Tape<Scalar>& tape, const ModelVars<Scalar>& vars, const ModelParams<Scalar>& like) {
  ModelParams<Scalar> g = zeros_like(like);
  std::size_t i = 0;
  visit_params(g, [&](const std::string& name, ParamGroup, Matrix<Scalar>& m) {
    const auto& [bound_name, var] = vars.named.at(i++);
    if (bound_name != name) throw InvariantViolation("collect_grads: parameter order mismatch at " + name);
    m = tape.grad(var.id);
    if (!m.allFinite()) throw NumericalError("non-finite gradient in parameter '" + name + "'");
  });
  return g;
}

namespace ad {

template <typename Scalar>
Var<Scalar> transpose_op(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value().transpose(), any_grad({a}),
                [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g.transpose()); });
}

// ProtoViT prototype layer for a batch: greedy matching on the current values
// (indices are treated as constants) followed by summed cosine similarity.
// z [B*N x d], tokens [d_p*t x d] -> [B x d_p]. Matches are written to `matches`
// when non-null, one MatchAssignment per sample.
template <typename Scalar>
Var<Scalar> protovit_similarity(Var<Scalar> z, Var<Scalar> tokens, int token_count, Eigen::Index num_patches,
                                std::vector<MatchAssignment>* matches = nullptr) {
  auto& t = *z.tape;
  const Eigen::Index segments = z.rows() / num_patches;
  PrototypeBank<Scalar> bank;
  bank.tokens = tokens.value();
  bank.token_count = token_count;
  const int dp = bank.size();
  Matrix<Scalar> out(segments, dp);
  std::vector<MatchAssignment> all(static_cast<std::size_t>(segments));
  for (Eigen::Index s = 0; s < segments; ++s) {
    LatentMap<Scalar> zs{z.value().middleRows(s * num_patches, num_patches), {}};
    all[static_cast<std::size_t>(s)] = greedy_match(zs, bank);
    for (int i = 0; i < dp; ++i) out(s, i) = similarity(bank, i, zs, all[static_cast<std::size_t>(s)]);
  }
  if (matches) *matches = all;
  const int iz = z.id, itok = tokens.id;
  return t.push(std::move(out), any_grad({z, tokens}),
                [iz, itok, token_count, num_patches, all = std::move(all)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                  const auto& zv = t.value(iz);
                  const auto& tv = t.value(itok);
                  Matrix<Scalar> gz = Matrix<Scalar>::Zero(zv.rows(), zv.cols());
                  Matrix<Scalar> gt = Matrix<Scalar>::Zero(tv.rows(), tv.cols());
                  for (std::size_t s = 0; s < all.size(); ++s) {
                    for (std::size_t i = 0; i < all[s].indices.size(); ++i) {
                      const Scalar gs = g(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i));
                      if (gs == Scalar(0)) continue;
                      for (int k = 0; k < token_count; ++k) {
                        const Eigen::Index tr = static_cast<Eigen::Index>(i) * token_count + k;
                        const Eigen::Index zr = static_cast<Eigen::Index>(s) * num_patches + all[s].indices[i][static_cast<std::size_t>(k)];
                        const auto a = tv.row(tr);
                        const auto b = zv.row(zr);
                        const Scalar na = a.norm(), nb = b.norm();
                        const Scalar c = a.dot(b) / (na * nb);
                        gt.row(tr) += gs * (b / (na * nb) - c * a / (na * na));
                        gz.row(zr) += gs * (a / (na * nb) - c * b / (nb * nb));
                      }
                    }
                  }
                  t.accumulate(iz, gz);
                  t.accumulate(itok, gt);
                });
}

}  // namespace ad

template <typename Scalar>
Var<Scalar> encoder_graph(Tape<Scalar>& tape, const ModelVars<Scalar>& v, const Matrix<Scalar>& patches) {
  Var<Scalar> x = tape.constant(patches);
  Var<Scalar> h = ad::add_tiled(ad::add_row(ad::matmul(x, v.patch_w), v.patch_b), v.pos);
  for (const auto& blk : v.blocks) {
    h = ad::add(h, ad::gelu(ad::segment_left_mul(blk.mix, h)));
    h = ad::add(h, ad::gelu(ad::add_row(ad::matmul(h, blk.chan_w), blk.chan_b)));
  }
  return h;
}

template <typename Scalar>
struct PipNetGraph {
  Var<Scalar> per_patch;    // [B*N x d_p]
  Var<Scalar> pooled;       // [B x d_p]
  Var<Scalar> scores;       // [B x C], raw p . theta_h
  Var<Scalar> train_probs;  // softmax(log(1 + scores^2))
};

template <typename Scalar>
PipNetGraph<Scalar> pipnet_graph(const ModelVars<Scalar>& v, Var<Scalar> z, Eigen::Index num_patches) {
  PipNetGraph<Scalar> out;
  Var<Scalar> logits = ad::matmul(z, ad::transpose_op(v.bank));
  out.per_patch = ad::softmax_rows(logits);
  out.pooled = ad::segment_colmax(out.per_patch, num_patches);
  out.scores = ad::matmul(out.pooled, v.head_w);
  out.train_probs = ad::softmax_rows(ad::log1p_square(out.scores));
  return out;
}


template <typename Scalar>
struct ProtoVitGraph {
  Var<Scalar> activations;  // [B x d_p]
  Var<Scalar> probs;        // [B x C]
  std::vector<MatchAssignment> matches;
};

template <typename Scalar>
ProtoVitGraph<Scalar> protovit_graph(const ModelVars<Scalar>& v, Var<Scalar> z, const ModelConfig& cfg) {
  ProtoVitGraph<Scalar> out;
  out.activations = ad::protovit_similarity(z, v.bank, cfg.token_count, cfg.num_patches(), &out.matches);
  Var<Scalar> logits = ad::matmul(out.activations, v.head_w);
  if (v.head_b) logits = ad::add_row(logits, *v.head_b);
  out.probs = ad::softmax_rows(logits);
  return out;
}

template <typename Scalar>
struct CbmGraph {
  Var<Scalar> concepts;  // [B x d_p]
  Var<Scalar> scores;    // [B x C]
  Var<Scalar> probs;
};

template <typename Scalar>
CbmGraph<Scalar> cbm_graph(const ModelVars<Scalar>& v, Var<Scalar> z, Eigen::Index num_patches) {
  CbmGraph<Scalar> out;
  Var<Scalar> pooled = ad::segment_mean(z, num_patches);
  out.concepts = ad::sigmoid(ad::add_row(ad::matmul(pooled, v.concept_w), v.concept_b));
  out.scores = ad::matmul(out.concepts, v.head_w);
  if (v.head_b) out.scores = ad::add_row(out.scores, *v.head_b);
  out.probs = ad::softmax_rows(out.scores);
  return out;
}

// Class probabilities used by the classification loss, whatever the variant.
template <typename Scalar>
Var<Scalar> training_probs(Tape<Scalar>& tape, const ModelVars<Scalar>& v, const ModelConfig& cfg, std::span<const ImageSample> xs) {
  Var<Scalar> z = encoder_graph(tape, v, stack_patches<Scalar>(xs, cfg));
  switch (cfg.variant) {
    case Variant::pipnet: return pipnet_graph(v, z, cfg.num_patches()).train_probs;
    case Variant::protovit: return protovit_graph(v, z, cfg).probs;
    case Variant::cbm: return cbm_graph(v, z, cfg.num_patches()).probs;
  }
  throw ConfigError("unknown variant");
}

}  // namespace protolab
