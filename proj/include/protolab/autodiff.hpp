#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation as a node holding its value; backward()
// walks the nodes in reverse creation order and accumulates adjoints. Nodes
// that do not depend on a trainable leaf carry no gradient. Forward values
// are computed by the same kernels the plain (tape-free) API uses.

#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "protolab/kernels.hpp"
#include "protolab/types.hpp"

namespace protolab {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(id); }
  Scalar scalar() const { return tape->value(id)(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& grad)>;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> variable(Mat value) { return push(std::move(value), true, nullptr); }

  Var<Scalar> push(Mat value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(backward)});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  // Gradient of the last backward() root with respect to node `id`; zero if unreached.
  Mat grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  void backward(Var<Scalar> root) {
    if (root.value().size() != 1) throw InvariantViolation("backward() requires a scalar root");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[root.id].grad = Mat::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

namespace ad {

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vs) {
  for (const auto& v : vs)
    if (v.tape->needs_grad(v.id)) return true;
  return false;
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  Matrix<Scalar> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), any_grad({a, b}), [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), any_grad({a, b}), [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename Scalar>
Var<Scalar> hadamard(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), any_grad({a, b}), [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  auto& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value() * s, any_grad({a}), [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * s); });
}

// a [r x c] + row [1 x c] broadcast over rows.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  auto& t = *a.tape;
  const int ia = a.id, ir = row.id;
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), any_grad({a, row}), [ia, ir](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

// a [B*N x d] + tile [N x d] repeated for each of the B segments.
template <typename Scalar>
Var<Scalar> add_tiled(Var<Scalar> a, Var<Scalar> tile) {
  auto& t = *a.tape;
  const Eigen::Index n = tile.rows();
  const Eigen::Index segments = a.rows() / n;
  Matrix<Scalar> out = a.value();
  for (Eigen::Index s = 0; s < segments; ++s) out.middleRows(s * n, n) += tile.value();
  const int ia = a.id, it = tile.id;
  return t.push(std::move(out), any_grad({a, tile}), [ia, it, n, segments](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g);
    if (!t.needs_grad(it)) return;
    Matrix<Scalar> gt = Matrix<Scalar>::Zero(n, g.cols());
    for (Eigen::Index s = 0; s < segments; ++s) gt += g.middleRows(s * n, n);
    t.accumulate(it, gt);
  });
}

// Per segment s: out_s = mix [N x N] * h_s [N x d].
template <typename Scalar>
Var<Scalar> segment_left_mul(Var<Scalar> mix, Var<Scalar> h) {
  auto& t = *h.tape;
  const Eigen::Index n = mix.rows();
  const Eigen::Index segments = h.rows() / n;
  Matrix<Scalar> out(h.rows(), h.cols());
  for (Eigen::Index s = 0; s < segments; ++s) out.middleRows(s * n, n).noalias() = mix.value() * h.value().middleRows(s * n, n);
  const int im = mix.id, ih = h.id;
  return t.push(std::move(out), any_grad({mix, h}), [im, ih, n, segments](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& m = t.value(im);
    const auto& hv = t.value(ih);
    if (t.needs_grad(im)) {
      Matrix<Scalar> gm = Matrix<Scalar>::Zero(n, n);
      for (Eigen::Index s = 0; s < segments; ++s) gm.noalias() += g.middleRows(s * n, n) * hv.middleRows(s * n, n).transpose();
      t.accumulate(im, gm);
    }
    if (t.needs_grad(ih)) {
      Matrix<Scalar> gh(hv.rows(), hv.cols());
      for (Eigen::Index s = 0; s < segments; ++s) gh.middleRows(s * n, n).noalias() = m.transpose() * g.middleRows(s * n, n);
      t.accumulate(ih, gh);
    }
  });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id;
  Matrix<Scalar> out = kernel::gelu(a.value());
  return t.push(std::move(out), any_grad({a}), [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr([](Scalar v) { return kernel::gelu_derivative(v); })));
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  auto& t = *a.tape;
  Matrix<Scalar> out = a.value().array().tanh().matrix();
  const int ia = a.id, io = static_cast<int>(t.size());
  return t.push(std::move(out), any_grad({a}), [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& y = t.value(io);
    t.accumulate(ia, g.cwiseProduct((Scalar(1) - y.array().square()).matrix()));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id, io = static_cast<int>(t.size());
  return t.push(kernel::sigmoid(a.value()), any_grad({a}), [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& y = t.value(io);
    t.accumulate(ia, g.cwiseProduct((y.array() * (Scalar(1) - y.array())).matrix()));
  });
}

// log(a + eps) elementwise.
template <typename Scalar>
Var<Scalar> log_eps(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id;
  return t.push(kernel::log_eps(a.value()), any_grad({a}), [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g.cwiseQuotient((t.value(ia).array() + Scalar(kLogEps)).matrix()));
  });
}

// log(1 + a^2) elementwise.
template <typename Scalar>
Var<Scalar> log1p_square(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id;
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar v) { return std::log1p(v * v); });
  return t.push(std::move(out), any_grad({a}), [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& x = t.value(ia);
    t.accumulate(ia, g.cwiseProduct(x.unaryExpr([](Scalar v) { return Scalar(2) * v / (Scalar(1) + v * v); })));
  });
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id, io = static_cast<int>(t.size());
  return t.push(kernel::softmax_rows(a.value()), any_grad({a}), [ia, io](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& y = t.value(io);
    Vector<Scalar> dots = g.cwiseProduct(y).rowwise().sum();
    Matrix<Scalar> ga = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(ia, ga);
  });
}

// Column-wise max inside each block of `n` rows: [B*n x k] -> [B x k].
// Gradient routes to the first maximal row.
template <typename Scalar>
Var<Scalar> segment_colmax(Var<Scalar> a, Eigen::Index n) {
  auto& t = *a.tape;
  const Eigen::Index segments = a.rows() / n;
  const Eigen::Index k = a.cols();
  Matrix<Scalar> out(segments, k);
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(segments * k));
  const auto& v = a.value();
  for (Eigen::Index s = 0; s < segments; ++s) {
    for (Eigen::Index j = 0; j < k; ++j) {
      Eigen::Index best = s * n;
      for (Eigen::Index r = s * n + 1; r < (s + 1) * n; ++r)
        if (v(r, j) > v(best, j)) best = r;
      out(s, j) = v(best, j);
      argmax[static_cast<std::size_t>(s * k + j)] = best;
    }
  }
  const int ia = a.id;
  const Eigen::Index rows = a.rows();
  return t.push(std::move(out), any_grad({a}),
                [ia, argmax = std::move(argmax), segments, k, rows](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                  Matrix<Scalar> ga = Matrix<Scalar>::Zero(rows, k);
                  for (Eigen::Index s = 0; s < segments; ++s)
                    for (Eigen::Index j = 0; j < k; ++j) ga(argmax[static_cast<std::size_t>(s * k + j)], j) += g(s, j);
                  t.accumulate(ia, ga);
                });
}

// Mean of each block of `n` rows: [B*n x d] -> [B x d].
template <typename Scalar>
Var<Scalar> segment_mean(Var<Scalar> a, Eigen::Index n) {
  auto& t = *a.tape;
  const Eigen::Index segments = a.rows() / n;
  Matrix<Scalar> out(segments, a.cols());
  for (Eigen::Index s = 0; s < segments; ++s) out.row(s) = a.value().middleRows(s * n, n).colwise().mean();
  const int ia = a.id;
  return t.push(std::move(out), any_grad({a}), [ia, n, segments](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> ga(segments * n, g.cols());
    for (Eigen::Index s = 0; s < segments; ++s) ga.middleRows(s * n, n) = (g.row(s) / Scalar(n)).replicate(n, 1);
    t.accumulate(ia, ga);
  });
}

// Row-wise dot product: [r x c], [r x c] -> [r x 1].
template <typename Scalar>
Var<Scalar> rowdot(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DomainError("rowdot: shape mismatch");
  Matrix<Scalar> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), any_grad({a, b}), [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Eigen::Index c = t.value(ia).cols();
    if (t.needs_grad(ia)) t.accumulate(ia, t.value(ib).cwiseProduct(g.replicate(1, c)));
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).cwiseProduct(g.replicate(1, c)));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(std::move(out), any_grad({a}), [ia, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, Matrix<Scalar>::Constant(r, c, g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> colsum(Var<Scalar> a) {
  auto& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  return t.push(a.value().colwise().sum(), any_grad({a}), [ia, r](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g.replicate(r, 1));
  });
}

// Stack rows of a on top of rows of b.
template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  auto& t = *a.tape;
  Matrix<Scalar> out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const int ia = a.id, ib = b.id;
  const Eigen::Index ra = a.rows(), rb = b.rows();
  return t.push(std::move(out), any_grad({a, b}), [ia, ib, ra, rb](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(ia, g.topRows(ra));
    t.accumulate(ib, g.bottomRows(rb));
  });
}

// Mean over rows of -log(probs(r, labels[r]) + eps).
template <typename Scalar>
Var<Scalar> nll_mean(Var<Scalar> probs, std::span<const int> labels) {
  auto& t = *probs.tape;
  const auto& p = probs.value();
  if (static_cast<Eigen::Index>(labels.size()) != p.rows()) throw DomainError("nll_mean: label count mismatch");
  Matrix<Scalar> out(1, 1);
  Scalar acc = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= p.cols()) throw DomainError("nll_mean: label out of range");
    acc -= std::log(p(r, y) + Scalar(kLogEps));
  }
  out(0, 0) = acc / Scalar(p.rows());
  const int ip = probs.id;
  std::vector<int> ys(labels.begin(), labels.end());
  return t.push(std::move(out), any_grad({probs}), [ip, ys = std::move(ys)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const auto& p = t.value(ip);
    Matrix<Scalar> gp = Matrix<Scalar>::Zero(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const int y = ys[static_cast<std::size_t>(r)];
      gp(r, y) = -g(0, 0) / (Scalar(p.rows()) * (p(r, y) + Scalar(kLogEps)));
    }
    t.accumulate(ip, gp);
  });
}

// Weighted sum of scalar nodes.
template <typename Scalar>
Var<Scalar> weighted_sum(Tape<Scalar>& t, std::span<const Var<Scalar>> terms, std::span<const Scalar> weights) {
  Var<Scalar> total = t.constant(Matrix<Scalar>::Zero(1, 1));
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (weights[i] == Scalar(0)) continue;
    total = add(total, scale(terms[i], weights[i]));
  }
  return total;
}

}  // namespace ad
}  // namespace protolab
