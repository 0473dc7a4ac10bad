#pragma once

// Three-stage interpretable classifier: encoder f, prototype/concept layer g,
// class head h. Parameters are dense Eigen matrices templated on the scalar
// type so the same code trains in float and is gradient-checked in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protolab/kernels.hpp"
#include "protolab/types.hpp"

namespace protolab {

struct ModelConfig {
  Variant variant = Variant::pipnet;
  int channels = 3;
  int image_size = 32;
  int patch_size = 8;
  int embed_dim = 32;  // d_z
  int depth = 1;       // number of token-mix + channel-mix blocks
  int num_prototypes = 16;  // d_p (concepts for cbm)
  int token_count = 1;      // t; always 1 for pipnet
  int num_classes = 2;
  std::uint64_t seed = 0;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (channels < 1 || image_size < 1 || patch_size < 1 || embed_dim < 1 || num_prototypes < 1 || num_classes < 1)
      throw ConfigError("model: all dimensions must be positive");
    if (image_size % patch_size != 0) throw ConfigError("model: image_size must be a multiple of patch_size");
    if (depth < 0 || depth > 2) throw ConfigError("model: depth must be 0, 1 or 2");
    if (token_count < 1) throw ConfigError("model: token_count must be >= 1");
    if (variant == Variant::pipnet && token_count != 1) throw ConfigError("model: pipnet prototypes have exactly one token");
  }
};

// Parameter groups used by staged training to freeze parts of the model.
enum class ParamGroup { backbone, neck, prototypes, head };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::neck: return "neck";
    case ParamGroup::prototypes: return "prototypes";
    case ParamGroup::head: return "head";
  }
  return "?";
}

template <typename Scalar>
struct MixBlock {
  Matrix<Scalar> mix;     // [N x N] token mixing
  Matrix<Scalar> chan_w;  // [d x d]
  Matrix<Scalar> chan_b;  // [1 x d]
};

template <typename Scalar>
struct EncoderParams {
  Matrix<Scalar> patch_w;  // [patch_dim x d]
  Matrix<Scalar> patch_b;  // [1 x d]
  Matrix<Scalar> pos;      // [N x d]
  std::vector<MixBlock<Scalar>> blocks;
};

template <typename Scalar>
struct LatentMap {
  Matrix<Scalar> patches;  // [numPatches x d]
  std::string provenance;
};

struct ProvenanceRecord {
  std::string sample_id;
  int sample_index = -1;
  std::vector<int> patch_indices;
  friend bool operator==(const ProvenanceRecord&, const ProvenanceRecord&) = default;
};

template <typename Scalar>
struct PrototypeBank {
  Matrix<Scalar> tokens;  // [(d_p * t) x d_z], prototype i owns rows [i*t, (i+1)*t)
  int token_count = 1;
  std::optional<std::vector<int>> class_assignment;
  std::vector<std::optional<ProvenanceRecord>> provenance;

  int size() const { return static_cast<int>(tokens.rows()) / token_count; }
  auto prototype(int i) { return tokens.middleRows(static_cast<Eigen::Index>(i) * token_count, token_count); }
  auto prototype(int i) const { return tokens.middleRows(static_cast<Eigen::Index>(i) * token_count, token_count); }
};

template <typename Scalar>
struct ClassHead {
  Matrix<Scalar> weights;              // [d_p x C]
  std::optional<Matrix<Scalar>> bias;  // [1 x C]
};

template <typename Scalar>
struct ConceptLayer {
  Matrix<Scalar> weights;  // [d_z x d_p]
  Matrix<Scalar> bias;     // [1 x d_p]
};

template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  EncoderParams<Scalar> encoder;
  PrototypeBank<Scalar> bank;      // unused by cbm
  ConceptLayer<Scalar> concepts;   // cbm only
  ClassHead<Scalar> head;

  Variant variant() const { return config.variant; }
};

// Visits every trainable array in a fixed order with (name, group, matrix).
template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  fn("encoder.patch_w", ParamGroup::backbone, p.encoder.patch_w);
  fn("encoder.patch_b", ParamGroup::backbone, p.encoder.patch_b);
  fn("encoder.pos", ParamGroup::backbone, p.encoder.pos);
  for (std::size_t b = 0; b < p.encoder.blocks.size(); ++b) {
    const std::string prefix = "encoder.block" + std::to_string(b);
    fn(prefix + ".mix", ParamGroup::backbone, p.encoder.blocks[b].mix);
    fn(prefix + ".chan_w", ParamGroup::neck, p.encoder.blocks[b].chan_w);
    fn(prefix + ".chan_b", ParamGroup::neck, p.encoder.blocks[b].chan_b);
  }
  if (p.config.variant == Variant::cbm) {
    fn("concepts.weights", ParamGroup::prototypes, p.concepts.weights);
    fn("concepts.bias", ParamGroup::prototypes, p.concepts.bias);
  } else {
    fn("bank.tokens", ParamGroup::prototypes, p.bank.tokens);
  }
  fn("head.weights", ParamGroup::head, p.head.weights);
  if (p.head.bias) fn("head.bias", ParamGroup::head, *p.head.bias);
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& in) {
  ModelParams<To> out;
  out.config = in.config;
  out.encoder.patch_w = in.encoder.patch_w.template cast<To>();
  out.encoder.patch_b = in.encoder.patch_b.template cast<To>();
  out.encoder.pos = in.encoder.pos.template cast<To>();
  for (const auto& b : in.encoder.blocks)
    out.encoder.blocks.push_back({b.mix.template cast<To>(), b.chan_w.template cast<To>(), b.chan_b.template cast<To>()});
  out.bank.tokens = in.bank.tokens.template cast<To>();
  out.bank.token_count = in.bank.token_count;
  out.bank.class_assignment = in.bank.class_assignment;
  out.bank.provenance = in.bank.provenance;
  out.concepts.weights = in.concepts.weights.template cast<To>();
  out.concepts.bias = in.concepts.bias.template cast<To>();
  out.head.weights = in.head.weights.template cast<To>();
  if (in.head.bias) out.head.bias = in.head.bias->template cast<To>();
  return out;
}

// Same shapes, all zero. Used as the gradient container.
template <typename Scalar>
ModelParams<Scalar> zeros_like(const ModelParams<Scalar>& p) {
  ModelParams<Scalar> z = p;
  visit_params(z, [](const std::string&, ParamGroup, Matrix<Scalar>& m) { m.setZero(); });
  return z;
}

template <typename Scalar>
std::size_t parameter_count(const ModelParams<Scalar>& p) {
  std::size_t n = 0;
  visit_params(const_cast<ModelParams<Scalar>&>(p),
               [&](const std::string&, ParamGroup, Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename Scalar>
ModelParams<Scalar> init_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto normal = [&](Eigen::Index r, Eigen::Index c, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    Matrix<Scalar> m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
    return m;
  };
  const int n = cfg.num_patches();
  const int d = cfg.embed_dim;
  const int dp = cfg.num_prototypes;
  const int c = cfg.num_classes;

  ModelParams<Scalar> p;
  p.config = cfg;
  p.encoder.patch_w = normal(cfg.patch_dim(), d, 0.0, 1.0 / std::sqrt(double(cfg.patch_dim())));
  p.encoder.patch_b = Matrix<Scalar>::Zero(1, d);
  p.encoder.pos = normal(n, d, 0.0, 0.1);
  for (int b = 0; b < cfg.depth; ++b) {
    MixBlock<Scalar> blk;
    blk.mix = normal(n, n, 0.0, 0.5 / std::sqrt(double(n)));
    blk.chan_w = normal(d, d, 0.0, 1.0 / std::sqrt(double(d)));
    blk.chan_b = Matrix<Scalar>::Zero(1, d);
    p.encoder.blocks.push_back(std::move(blk));
  }

  switch (cfg.variant) {
    case Variant::pipnet: {
      p.bank.token_count = 1;
      p.bank.tokens = normal(dp, d, 0.0, 1.0 / std::sqrt(double(d)));
      p.bank.provenance.assign(static_cast<std::size_t>(dp), std::nullopt);
      p.head.weights = normal(dp, c, 1.0, 0.1).cwiseMax(Scalar(0));
      break;
    }
    case Variant::protovit: {
      p.bank.token_count = cfg.token_count;
      p.bank.tokens = normal(static_cast<Eigen::Index>(dp) * cfg.token_count, d, 0.0, 1.0);
      p.bank.provenance.assign(static_cast<std::size_t>(dp), std::nullopt);
      std::vector<int> assignment(static_cast<std::size_t>(dp));
      for (int i = 0; i < dp; ++i) assignment[static_cast<std::size_t>(i)] = i % c;
      p.bank.class_assignment = assignment;
      p.head.weights = Matrix<Scalar>::Constant(dp, c, Scalar(-0.5));
      for (int i = 0; i < dp; ++i) p.head.weights(i, i % c) = Scalar(1);
      p.head.bias = Matrix<Scalar>::Zero(1, c);
      break;
    }
    case Variant::cbm: {
      p.concepts.weights = normal(d, dp, 0.0, 1.0 / std::sqrt(double(d)));
      p.concepts.bias = Matrix<Scalar>::Zero(1, dp);
      p.head.weights = normal(dp, c, 0.0, 1.0 / std::sqrt(double(dp)));
      p.head.bias = Matrix<Scalar>::Zero(1, c);
      break;
    }
  }
  return p;
}

// Splits an image into row-major non-overlapping patches: [N x channels*P*P],
// features ordered (channel, dy, dx).
template <typename Scalar>
Matrix<Scalar> extract_patches(const ImageSample& x, const ModelConfig& cfg) {
  if (x.channels != cfg.channels || x.height != cfg.image_size || x.width != cfg.image_size)
    throw ConfigError("encode: image is " + std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                      std::to_string(x.width) + ", encoder expects " + std::to_string(cfg.channels) + "x" +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  const int ps = cfg.patch_size;
  const int g = cfg.grid();
  Matrix<Scalar> out(cfg.num_patches(), cfg.patch_dim());
  for (int gr = 0; gr < g; ++gr)
    for (int gc = 0; gc < g; ++gc) {
      const int row = gr * g + gc;
      int f = 0;
      for (int ch = 0; ch < x.channels; ++ch)
        for (int dy = 0; dy < ps; ++dy)
          for (int dx = 0; dx < ps; ++dx) out(row, f++) = static_cast<Scalar>(x.at(ch, gr * ps + dy, gc * ps + dx));
    }
  return out;
}

template <typename Scalar>
Matrix<Scalar> stack_patches(std::span<const ImageSample> xs, const ModelConfig& cfg) {
  const int n = cfg.num_patches();
  Matrix<Scalar> out(static_cast<Eigen::Index>(xs.size()) * n, cfg.patch_dim());
  for (std::size_t i = 0; i < xs.size(); ++i) out.middleRows(static_cast<Eigen::Index>(i) * n, n) = extract_patches<Scalar>(xs[i], cfg);
  return out;
}

// Pixel rectangle covered by patch `index`.
inline Rect patch_rect(int index, const ModelConfig& cfg) {
  const int g = cfg.grid();
  const int ps = cfg.patch_size;
  const int r = index / g, c = index % g;
  return Rect{c * ps, r * ps, (c + 1) * ps, (r + 1) * ps};
}

// ---------------------------------------------------------------------------
// Encoder f.

// Encodes stacked patches of several images; rows are grouped per image.
template <typename Scalar>
Matrix<Scalar> encode_patches(const Matrix<Scalar>& patches, const EncoderParams<Scalar>& enc) {
  const Eigen::Index n = enc.pos.rows();
  const Eigen::Index segments = patches.rows() / n;
  Matrix<Scalar> h = patches * enc.patch_w;
  h.rowwise() += enc.patch_b.row(0);
  for (Eigen::Index s = 0; s < segments; ++s) h.middleRows(s * n, n) += enc.pos;
  for (const auto& blk : enc.blocks) {
    Matrix<Scalar> mixed(h.rows(), h.cols());
    for (Eigen::Index s = 0; s < segments; ++s) mixed.middleRows(s * n, n).noalias() = blk.mix * h.middleRows(s * n, n);
    h += Matrix<Scalar>(kernel::gelu(mixed));
    Matrix<Scalar> ch = h * blk.chan_w;
    ch.rowwise() += blk.chan_b.row(0);
    h += Matrix<Scalar>(kernel::gelu(ch));
  }
  return h;
}

template <typename Scalar>
LatentMap<Scalar> encode(const ImageSample& x, const ModelParams<Scalar>& params) {
  return LatentMap<Scalar>{encode_patches(extract_patches<Scalar>(x, params.config), params.encoder), x.id};
}

// ---------------------------------------------------------------------------
// ProtoViT-style greedy matching and similarity.

struct MatchAssignment {
  static constexpr int kUnmatched = -1;
  std::vector<std::vector<int>> indices;  // per prototype, one patch index per token
};

namespace detail {

template <typename Scalar>
Scalar checked_norm(const auto& v, const char* what) {
  const Scalar n = v.norm();
  if (!(n > Scalar(0)) || !std::isfinite(static_cast<double>(n))) throw DomainError(std::string("zero-norm or non-finite ") + what);
  return n;
}

// [t x N] cosine similarities between the tokens of one prototype and every patch.
template <typename Scalar>
Matrix<Scalar> token_patch_cosines(const auto& proto_tokens, const Matrix<Scalar>& z) {
  const Eigen::Index t = proto_tokens.rows();
  Vector<Scalar> znorm(z.rows());
  for (Eigen::Index j = 0; j < z.rows(); ++j) znorm(j) = checked_norm<Scalar>(z.row(j), "latent patch");
  Matrix<Scalar> cos = proto_tokens * z.transpose();
  for (Eigen::Index k = 0; k < t; ++k) {
    const Scalar pn = checked_norm<Scalar>(proto_tokens.row(k), "prototype token");
    for (Eigen::Index j = 0; j < z.rows(); ++j) cos(k, j) /= pn * znorm(j);
  }
  return cos;
}

// Greedy assignment over a [t x N] cosine table: repeatedly take the largest
// remaining (token, patch) pair; ties go to the lowest patch, then lowest token.
template <typename Scalar>
std::vector<int> greedy_assign(const Matrix<Scalar>& cos) {
  const Eigen::Index t = cos.rows(), n = cos.cols();
  std::vector<int> out(static_cast<std::size_t>(t), MatchAssignment::kUnmatched);
  std::vector<char> patch_used(static_cast<std::size_t>(n), 0);
  for (Eigen::Index step = 0; step < t; ++step) {
    Eigen::Index best_k = -1, best_j = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (patch_used[static_cast<std::size_t>(j)]) continue;
      for (Eigen::Index k = 0; k < t; ++k) {
        if (out[static_cast<std::size_t>(k)] != MatchAssignment::kUnmatched) continue;
        if (best_k < 0 || cos(k, j) > cos(best_k, best_j)) {
          best_k = k;
          best_j = j;
        }
      }
    }
    out[static_cast<std::size_t>(best_k)] = static_cast<int>(best_j);
    patch_used[static_cast<std::size_t>(best_j)] = 1;
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
std::vector<int> greedy_match_one(const LatentMap<Scalar>& z, const PrototypeBank<Scalar>& bank, int i) {
  if (z.patches.rows() < bank.token_count)
    throw InfeasibleMatchError("greedy_match: " + std::to_string(z.patches.rows()) + " patches cannot host " +
                               std::to_string(bank.token_count) + " distinct tokens");
  if (z.patches.cols() != bank.tokens.cols()) throw ConfigError("greedy_match: latent width differs from prototype width");
  return detail::greedy_assign<Scalar>(detail::token_patch_cosines<Scalar>(bank.prototype(i), z.patches));
}

template <typename Scalar>
MatchAssignment greedy_match(const LatentMap<Scalar>& z, const PrototypeBank<Scalar>& bank) {
  MatchAssignment a;
  a.indices.reserve(static_cast<std::size_t>(bank.size()));
  for (int i = 0; i < bank.size(); ++i) a.indices.push_back(greedy_match_one(z, bank, i));
  return a;
}

// Summed cosine similarity of prototype i against its matched patches; in [-t, t].
template <typename Scalar>
Scalar similarity(const PrototypeBank<Scalar>& bank, int i, const LatentMap<Scalar>& z, const MatchAssignment& a) {
  const auto& idx = a.indices.at(static_cast<std::size_t>(i));
  const auto proto = bank.prototype(i);
  Scalar s = 0;
  for (int k = 0; k < bank.token_count; ++k) {
    const int j = idx[static_cast<std::size_t>(k)];
    if (j == MatchAssignment::kUnmatched) continue;
    if (j < 0 || j >= z.patches.rows()) throw DomainError("similarity: match index out of range");
    const Scalar pn = detail::checked_norm<Scalar>(proto.row(k), "prototype token");
    const Scalar zn = detail::checked_norm<Scalar>(z.patches.row(j), "latent patch");
    s += proto.row(k).dot(z.patches.row(j)) / (pn * zn);
  }
  return s;
}

template <typename Scalar>
struct ProtoVitActivations {
  RowVector<Scalar> values;  // [d_p], each in [-t, t]
  MatchAssignment assignment;
};

template <typename Scalar>
ProtoVitActivations<Scalar> protovit_prototypes(const LatentMap<Scalar>& z, const PrototypeBank<Scalar>& bank) {
  ProtoVitActivations<Scalar> out;
  out.assignment = greedy_match(z, bank);
  out.values.resize(bank.size());
  for (int i = 0; i < bank.size(); ++i) out.values(i) = similarity(bank, i, z, out.assignment);
  return out;
}

// ---------------------------------------------------------------------------
// PIP-Net-style prototypes: softmax over prototype channels, max-pool over patches.

template <typename Scalar>
struct PipNetActivations {
  Matrix<Scalar> per_patch;  // [N x d_p], rows are distributions
  RowVector<Scalar> pooled;  // [d_p], in [0,1]
};

template <typename Scalar>
PipNetActivations<Scalar> pipnet_prototypes(const Matrix<Scalar>& logits) {
  if (!logits.allFinite()) throw DomainError("pipnet_prototypes: non-finite input");
  PipNetActivations<Scalar> out;
  out.per_patch = kernel::softmax_rows(logits);
  out.pooled = out.per_patch.colwise().maxCoeff();
  return out;
}

// Per-patch prototype logits of the PIP-Net head: z * prototypes^T.
template <typename Scalar>
Matrix<Scalar> pipnet_logits(const LatentMap<Scalar>& z, const PrototypeBank<Scalar>& bank) {
  if (z.patches.cols() != bank.tokens.cols()) throw ConfigError("pipnet: latent width differs from prototype width");
  return z.patches * bank.tokens.transpose();
}

// ---------------------------------------------------------------------------
// Heads.

template <typename Scalar>
void check_nonnegative_head(const ClassHead<Scalar>& head) {
  if ((head.weights.array() < Scalar(0)).any()) throw InvariantViolation("pipnet head has a negative weight");
  if (head.bias) throw InvariantViolation("pipnet head must not have a bias");
}

template <typename Scalar>
RowVector<Scalar> classify(const RowVector<Scalar>& p, const ClassHead<Scalar>& head, Variant variant) {
  if (p.size() != head.weights.rows()) throw ConfigError("classify: activation width differs from head rows");
  RowVector<Scalar> s = p * head.weights;
  switch (variant) {
    case Variant::pipnet:
      check_nonnegative_head(head);
      return s;
    case Variant::protovit:
      if (head.bias) s += head.bias->row(0);
      return kernel::softmax_rows(Matrix<Scalar>(s)).row(0);
    case Variant::cbm:
      if (head.bias) s += head.bias->row(0);
      return s;
  }
  return s;
}

template <typename Scalar>
struct CbmOutput {
  RowVector<Scalar> concepts;  // in (0,1)
  RowVector<Scalar> scores;
};

template <typename Scalar>
CbmOutput<Scalar> cbm_forward(const LatentMap<Scalar>& z, const ConceptLayer<Scalar>& layer, const ClassHead<Scalar>& head) {
  if (z.patches.cols() != layer.weights.rows()) throw ConfigError("cbm: latent width differs from concept layer");
  RowVector<Scalar> pooled = z.patches.colwise().mean();
  RowVector<Scalar> logits = pooled * layer.weights + layer.bias.row(0);
  CbmOutput<Scalar> out;
  out.concepts = kernel::sigmoid(Matrix<Scalar>(logits)).row(0);
  out.scores = classify(out.concepts, head, Variant::cbm);
  return out;
}

// Index of the largest score; ties go to the lowest index.
template <typename Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& scores) {
  int best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i)
    if (scores(i) > scores(best)) best = static_cast<int>(i);
  return best;
}

// Full forward pass with every intermediate the analysis tools need.
template <typename Scalar>
struct Forward {
  LatentMap<Scalar> latent;
  Matrix<Scalar> per_patch;       // pipnet only: [N x d_p]
  RowVector<Scalar> activations;  // p
  MatchAssignment assignment;     // protovit only
  RowVector<Scalar> scores;
  int prediction = 0;
};

template <typename Scalar>
Forward<Scalar> forward(const ImageSample& x, const ModelParams<Scalar>& params) {
  Forward<Scalar> out;
  out.latent = encode(x, params);
  switch (params.variant()) {
    case Variant::pipnet: {
      auto act = pipnet_prototypes(pipnet_logits(out.latent, params.bank));
      out.per_patch = std::move(act.per_patch);
      out.activations = std::move(act.pooled);
      break;
    }
    case Variant::protovit: {
      auto act = protovit_prototypes(out.latent, params.bank);
      out.activations = std::move(act.values);
      out.assignment = std::move(act.assignment);
      break;
    }
    case Variant::cbm: {
      auto o = cbm_forward(out.latent, params.concepts, params.head);
      out.activations = std::move(o.concepts);
      out.scores = std::move(o.scores);
      out.prediction = argmax_lowest(out.scores);
      return out;
    }
  }
  out.scores = classify(out.activations, params.head, params.variant());
  out.prediction = argmax_lowest(out.scores);
  return out;
}

template <typename Scalar>
int predict(const ImageSample& x, const ModelParams<Scalar>& params) {
  return forward(x, params).prediction;
}

}  // namespace protolab
