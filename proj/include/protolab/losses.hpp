#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protolab/graph.hpp"

namespace protolab {

// Loss weights for PIP-Net training (classification/alignment/uniformity) and
// for adversarial fine-tuning (split alignment/uniformity over clean and
// triggered inputs). All nonnegative.
struct LossWeights {
  double classification = 0;
  double alignment = 0;
  double uniformity = 0;
  double align_clean = 0;
  double align_trigger = 0;
  double uniform_clean = 0;
  double uniform_trigger = 0;

  void validate() const {
    for (double w : {classification, alignment, uniformity, align_clean, align_trigger, uniform_clean, uniform_trigger})
      if (!std::isfinite(w) || w < 0) throw ConfigError("loss weights must be finite and nonnegative");
  }
};

inline LossWeights loss_preset(const std::string& name) {
  LossWeights w;
  if (name == "train") {
    w.classification = 2.0;
    w.alignment = 5.0;
    w.uniformity = 2.0;
  } else if (name == "disguise") {
    w.classification = 0.5;
    w.align_clean = 2.0;
    w.align_trigger = 4.0;
    w.uniform_clean = 0.10;
    w.uniform_trigger = 0.20;
  } else if (name == "redherring") {
    w.classification = 0.5;
    w.align_clean = 1.0;
    w.align_trigger = 0.0;
    w.uniform_clean = 0.25;
    w.uniform_trigger = 0.25;
  } else {
    throw ConfigError("unknown loss-weight profile '" + name + "'");
  }
  return w;
}

struct LossValue {
  double total = 0;
  std::map<std::string, double> terms;    // unweighted term values
  std::map<std::string, double> weights;  // weight applied to each term
};

// ---------------------------------------------------------------------------
// Plain loss functions.

// -log(scores[y]) with the log floored at eps; scores must be a probability vector.
template <typename Derived>
double classification_loss(const Eigen::MatrixBase<Derived>& scores, int y) {
  if (y < 0 || y >= scores.size()) throw DomainError("classification_loss: label " + std::to_string(y) + " out of range");
  return -std::log(static_cast<double>(scores(y)) + kLogEps);
}

// -sum_i log(zA_i . zB_i + eps) over patch rows.
template <typename Scalar>
double alignment_loss(const Matrix<Scalar>& za, const Matrix<Scalar>& zb) {
  if (za.rows() != zb.rows() || za.cols() != zb.cols()) throw DomainError("alignment_loss: shape mismatch");
  double acc = 0;
  for (Eigen::Index i = 0; i < za.rows(); ++i) acc -= std::log(static_cast<double>(za.row(i).dot(zb.row(i))) + kLogEps);
  return acc;
}

// -sum_j log(tanh(sum over batch of P[., j]) + eps); P is [batch x d_p].
template <typename Scalar>
double uniformity_loss(const Matrix<Scalar>& pooled) {
  RowVector<Scalar> sums = pooled.colwise().sum();
  double acc = 0;
  for (Eigen::Index j = 0; j < sums.size(); ++j) acc -= std::log(std::tanh(static_cast<double>(sums(j))) + kLogEps);
  return acc;
}

// Training-time PIP-Net logit: log(1 + (p . theta_h)^2) per class.
template <typename Scalar>
RowVector<Scalar> sparsity_logit(const RowVector<Scalar>& p, const ClassHead<Scalar>& head) {
  RowVector<Scalar> s = p * head.weights;
  return s.unaryExpr([](Scalar v) { return std::log1p(v * v); });
}

// ---------------------------------------------------------------------------
// Graph versions of the losses, reduced to means for training: classification
// over samples, alignment over every (sample, patch) row, uniformity over
// prototypes. Keeps the term scales independent of grid size and d_p.

namespace ad {

// za, zb [B*N x d_p] -> mean over rows of -log(za_r . zb_r + eps).
template <typename Scalar>
Var<Scalar> alignment_mean(Var<Scalar> za, Var<Scalar> zb) {
  Var<Scalar> terms = log_eps(rowdot(za, zb));
  return scale(sum(terms), Scalar(-1) / Scalar(za.rows()));
}

// pooled [B x d_p] -> mean over prototypes of -log(tanh(batch sum) + eps).
template <typename Scalar>
Var<Scalar> uniformity(Var<Scalar> pooled) {
  return scale(sum(log_eps(tanh(colsum(pooled)))), Scalar(-1) / Scalar(pooled.cols()));
}

// Rows of `a` selected by `index`, in order.
template <typename Scalar>
Var<Scalar> gather_blocks(Var<Scalar> a, std::span<const int> index, Eigen::Index block) {
  auto& t = *a.tape;
  Matrix<Scalar> out(static_cast<Eigen::Index>(index.size()) * block, a.cols());
  for (std::size_t i = 0; i < index.size(); ++i)
    out.middleRows(static_cast<Eigen::Index>(i) * block, block) = a.value().middleRows(index[i] * block, block);
  const int ia = a.id;
  std::vector<int> idx(index.begin(), index.end());
  return t.push(std::move(out), any_grad({a}), [ia, idx = std::move(idx), block](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> ga = Matrix<Scalar>::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      ga.middleRows(idx[i] * block, block) += g.middleRows(static_cast<Eigen::Index>(i) * block, block);
    t.accumulate(ia, ga);
  });
}

}  // namespace ad

template <typename Scalar>
LossValue to_loss_value(Var<Scalar> total, const std::vector<std::string>& names, const std::vector<Var<Scalar>>& terms,
                        const std::vector<double>& weights) {
  LossValue v;
  v.total = static_cast<double>(total.scalar());
  for (std::size_t i = 0; i < names.size(); ++i) {
    v.terms[names[i]] = static_cast<double>(terms[i].scalar());
    v.weights[names[i]] = weights[i];
  }
  return v;
}

// A batch with two augmented views per sample.
struct TwoViewBatch {
  std::vector<ImageSample> view_a;
  std::vector<ImageSample> view_b;
  std::vector<int> labels;
};

template <typename Scalar>
struct LossGraph {
  Var<Scalar> total;
  std::vector<std::string> names;
  std::vector<Var<Scalar>> terms;
  std::vector<double> weights;

  LossValue value() const { return to_loss_value(total, names, terms, weights); }
};

// Combined PIP-Net objective: wC*L_C + wA*L_A + wU*L_U. L_C averages both
// views, L_A aligns the per-patch distributions of the two views, L_U is the
// mean of the uniformity of each view's pooled activations.
template <typename Scalar>
LossGraph<Scalar> pipnet_loss_graph(Tape<Scalar>& tape, const ModelVars<Scalar>& v, const ModelConfig& cfg,
                                    const TwoViewBatch& batch, const LossWeights& w) {
  if (cfg.variant != Variant::pipnet) throw ConfigError("pipnet_loss requires the pipnet variant");
  if (batch.view_a.size() != batch.view_b.size() || batch.view_a.size() != batch.labels.size() || batch.labels.empty())
    throw DomainError("pipnet_loss: malformed batch");
  const Eigen::Index n = cfg.num_patches();
  auto ga = pipnet_graph(v, encoder_graph(tape, v, stack_patches<Scalar>(batch.view_a, cfg)), n);
  auto gb = pipnet_graph(v, encoder_graph(tape, v, stack_patches<Scalar>(batch.view_b, cfg)), n);

  std::vector<int> labels2(batch.labels);
  labels2.insert(labels2.end(), batch.labels.begin(), batch.labels.end());
  Var<Scalar> lc = ad::nll_mean(ad::concat_rows(ga.train_probs, gb.train_probs), std::span<const int>(labels2));
  Var<Scalar> la = ad::alignment_mean(ga.per_patch, gb.per_patch);
  Var<Scalar> lu = ad::scale(ad::add(ad::uniformity(ga.pooled), ad::uniformity(gb.pooled)), Scalar(0.5));

  LossGraph<Scalar> out;
  out.names = {"classification", "alignment", "uniformity"};
  out.terms = {lc, la, lu};
  out.weights = {w.classification, w.alignment, w.uniformity};
  std::vector<Scalar> ws(out.weights.begin(), out.weights.end());
  out.total = ad::weighted_sum(tape, std::span<const Var<Scalar>>(out.terms), std::span<const Scalar>(ws));
  return out;
}

// Clean inputs plus triggered copies; triggered[k] was made from clean[source[k]]
// and carries the flipped label.
struct AttackBatch {
  std::vector<ImageSample> clean;
  std::vector<ImageSample> triggered;
  std::vector<int> source;
};

// Adversarial fine-tuning objective. z comes from the frozen reference on clean
// inputs, z_hat / z_hat' from the trainable copy on clean / triggered inputs.
template <typename Scalar>
LossGraph<Scalar> adversarial_loss_graph(Tape<Scalar>& tape, const ModelVars<Scalar>& ref, const ModelVars<Scalar>& att,
                                         const ModelConfig& cfg, const AttackBatch& batch, const LossWeights& w) {
  if (cfg.variant != Variant::pipnet) throw ConfigError("adversarial_loss requires the pipnet variant");
  if (batch.clean.empty()) throw DomainError("adversarial_loss: empty clean batch");
  if (batch.triggered.size() != batch.source.size()) throw DomainError("adversarial_loss: triggered/source size mismatch");
  const Eigen::Index n = cfg.num_patches();
  const bool has_trigger = !batch.triggered.empty();

  auto z_ref = pipnet_graph(ref, encoder_graph(tape, ref, stack_patches<Scalar>(batch.clean, cfg)), n);
  auto z_hat = pipnet_graph(att, encoder_graph(tape, att, stack_patches<Scalar>(batch.clean, cfg)), n);

  std::vector<int> labels;
  for (const auto& x : batch.clean) labels.push_back(x.label);
  Var<Scalar> probs = z_hat.train_probs;
  Var<Scalar> zero = tape.constant(Matrix<Scalar>::Zero(1, 1));
  Var<Scalar> la_t = zero, lu_t = zero;
  if (has_trigger) {
    auto z_trig = pipnet_graph(att, encoder_graph(tape, att, stack_patches<Scalar>(batch.triggered, cfg)), n);
    for (const auto& x : batch.triggered) labels.push_back(x.label);
    probs = ad::concat_rows(probs, z_trig.train_probs);
    Var<Scalar> z_src = ad::gather_blocks(z_ref.per_patch, std::span<const int>(batch.source), n);
    la_t = ad::alignment_mean(z_src, z_trig.per_patch);
    lu_t = ad::uniformity(z_trig.pooled);
  }
  Var<Scalar> lc = ad::nll_mean(probs, std::span<const int>(labels));
  Var<Scalar> la_c = ad::alignment_mean(z_ref.per_patch, z_hat.per_patch);
  Var<Scalar> lu_c = ad::uniformity(z_hat.pooled);

  LossGraph<Scalar> out;
  out.names = {"classification", "align_clean", "align_trigger", "uniform_clean", "uniform_trigger"};
  out.terms = {lc, la_c, la_t, lu_c, lu_t};
  out.weights = {w.classification, w.align_clean, w.align_trigger, w.uniform_clean, w.uniform_trigger};
  std::vector<Scalar> ws(out.weights.begin(), out.weights.end());
  out.total = ad::weighted_sum(tape, std::span<const Var<Scalar>>(out.terms), std::span<const Scalar>(ws));
  return out;
}

template <typename Scalar>
LossValue pipnet_loss(const TwoViewBatch& batch, const ModelParams<Scalar>& theta, const LossWeights& w) {
  Tape<Scalar> tape;
  auto v = bind_constant(tape, theta);
  return pipnet_loss_graph(tape, v, theta.config, batch, w).value();
}

template <typename Scalar>
LossValue adversarial_loss(const AttackBatch& batch, const ModelParams<Scalar>& ref, const ModelParams<Scalar>& attacked,
                           const LossWeights& w) {
  if (ref.variant() != attacked.variant()) throw ConfigError("adversarial_loss: variant mismatch between reference and copy");
  Tape<Scalar> tape;
  auto rv = bind_constant(tape, ref);
  auto av = bind_constant(tape, attacked);
  return adversarial_loss_graph(tape, rv, av, attacked.config, batch, w).value();
}

// Gradient of a scalar loss with respect to every parameter of theta.
// `build` records the loss on the tape given the bound parameters.
template <typename Scalar>
using LossBuilder = std::function<Var<Scalar>(Tape<Scalar>&, const ModelVars<Scalar>&)>;

template <typename Scalar>
struct GradResult {
  double loss = 0;
  ModelParams<Scalar> grad;
};

template <typename Scalar>
GradResult<Scalar> grad(const LossBuilder<Scalar>& build, const ModelParams<Scalar>& theta,
                        const std::function<bool(ParamGroup)>& trainable = [](ParamGroup) { return true; }) {
  Tape<Scalar> tape;
  auto v = bind(tape, theta, trainable);
  Var<Scalar> loss = build(tape, v);
  if (!std::isfinite(static_cast<double>(loss.scalar()))) throw NumericalError("non-finite loss value");
  tape.backward(loss);
  return {static_cast<double>(loss.scalar()), collect_grads(tape, v, theta)};
}

}  // namespace protolab
