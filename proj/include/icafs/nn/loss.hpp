#pragma once

#include "icafs/nn/tape.hpp"

namespace icafs::nn {

/// Softmax cross-entropy of a single 1 x C logit row against a class index.
Var cross_entropy_softmax(Var logits, int label);

/// Tape-free value, max-subtracted.
double cross_entropy_softmax(const RowVector& logits, int label);

RowVector softmax(const RowVector& logits);

}  // namespace icafs::nn
