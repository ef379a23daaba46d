#include "icafs/nn/loss.hpp"

#include <cmath>

namespace icafs::nn {

Var cross_entropy_softmax(Var logits, int label) {
  if (logits.rows() != 1) throw ShapeError("cross_entropy_softmax expects a single logit row");
  return cross_entropy(logits, {label});
}

double cross_entropy_softmax(const RowVector& logits, int label) {
  if (logits.size() < 2) throw ShapeError("cross_entropy_softmax: need at least 2 logits");
  if (label < 0 || label >= logits.size()) throw Error("cross_entropy_softmax: label out of range");
  const double m = logits.maxCoeff();
  const double z = (logits.array() - m).exp().sum();
  return std::log(z) + m - logits(label);
}

RowVector softmax(const RowVector& logits) {
  RowVector e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

}  // namespace icafs::nn
