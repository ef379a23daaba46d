#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "icafs/nn/tensor.hpp"

namespace icafs::nn {

using Rng = std::mt19937_64;

/// Independent stream for (master seed, key...) so results do not depend on scheduling.
Rng derive_rng(std::uint64_t master, std::initializer_list<std::uint64_t> keys);

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0);
Matrix uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo, double hi);

}  // namespace icafs::nn
