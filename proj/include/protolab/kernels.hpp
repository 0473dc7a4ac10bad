#pragma once

// Elementwise and row-wise kernels shared by the plain forward pass and the tape.

#include <cmath>

#include "protolab/types.hpp"

namespace protolab {

namespace kernel {

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar c = Scalar(0.044715);
  return x.unaryExpr([k, c](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::tanh(k * (v + c * v * v * v))); });
}

template <typename Scalar>
Scalar gelu_derivative(Scalar v) {
  const Scalar k = Scalar(0.7978845608028654);
  const Scalar c = Scalar(0.044715);
  const Scalar t = std::tanh(k * (v + c * v * v * v));
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * v * (Scalar(1) - t * t) * k * (Scalar(1) + Scalar(3) * c * v * v);
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> sigmoid(const Matrix<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
}

template <typename Scalar>
Matrix<Scalar> log_eps(const Matrix<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return std::log(v + Scalar(kLogEps)); });
}

}  // namespace kernel

}  // namespace protolab
