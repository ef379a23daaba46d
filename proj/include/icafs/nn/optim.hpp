#pragma once

#include <span>
#include <string>

#include "icafs/nn/random.hpp"
#include "icafs/nn/tensor.hpp"

namespace icafs::nn {

/// p <- p - lr * g. Every parameter needs a finite gradient of matching shape.
void sgd_step(ParamSet& params, const ParamGrads& grads, double lr);

double global_norm(const ParamGrads& grads);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(ParamSet& params, const ParamGrads& grads);
  std::size_t steps() const { return steps_; }

 private:
  AdamConfig config_;
  ParamGrads m_;
  ParamGrads v_;
  std::size_t steps_ = 0;
};

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  AdamConfig adam;  // adam.lr doubles as the SGD learning rate
};

OptimizerKind optimizer_from_string(const std::string& s);

/// Per-party optimizer state.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config), adam_(config.adam) {}
  void step(ParamSet& params, const ParamGrads& grads);
  double lr() const { return config_.adam.lr; }

 private:
  OptimizerConfig config_;
  Adam adam_;
};

/// Rescales g in place so that its global norm is at most clip.
void clip_to_norm(ParamGrads& g, double clip);

/**
 * Clip each per-sample gradient to norm <= clip, sum, add N(0, (sigma*clip)^2)
 * per coordinate, and divide by the number of samples.
 */
ParamGrads privatize(std::span<const ParamGrads> per_sample, double clip, double noise_multiplier, Rng& rng);

void dp_sgd_step(ParamSet& params, std::span<const ParamGrads> per_sample, double clip, double noise_multiplier,
                 double lr, Rng& rng);

}  // namespace icafs::nn
