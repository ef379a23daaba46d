#pragma once

#include <functional>

#include "icafs/nn/tape.hpp"

namespace icafs::nn {

/// Builds a scalar loss on the given tape from bound parameters.
using ScalarFn = std::function<Var(Tape&, const ParamNodes&)>;

/**
 * Max over coordinates of |analytic - central difference| /
 * (|analytic| + |central difference| + 1e-12).
 */
double grad_check(const ScalarFn& f, const ParamSet& params, double h = 1e-5);

/// Same comparison against externally supplied gradients.
double grad_check(const std::function<double(const ParamSet&)>& f, const ParamSet& params,
                  const ParamGrads& analytic, double h = 1e-5);

ParamGrads finite_difference(const std::function<double(const ParamSet&)>& f, const ParamSet& params,
                             double h = 1e-5);

}  // namespace icafs::nn
