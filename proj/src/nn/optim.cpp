#include "icafs/nn/optim.hpp"

#include <cmath>

namespace icafs::nn {

namespace {
const Matrix& grad_for(const ParamGrads& grads, const std::string& name, const Tensor& t) {
  auto it = grads.find(name);
  if (it == grads.end()) throw Error("missing gradient for parameter " + name);
  const Matrix& g = it->second;
  if (g.rows() != t.value().rows() || g.cols() != t.value().cols()) {
    throw ShapeError("gradient shape mismatch for parameter " + name);
  }
  if (!g.allFinite()) throw NumericError("non-finite gradient for parameter " + name);
  return g;
}
}  // namespace

void sgd_step(ParamSet& params, const ParamGrads& grads, double lr) {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  for (auto& [name, t] : params) {
    const Matrix& g = grad_for(grads, name, t);
    t.value() -= lr * g;
  }
}

double global_norm(const ParamGrads& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

void Adam::step(ParamSet& params, const ParamGrads& grads) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (auto& [name, t] : params) {
    const Matrix& g = grad_for(grads, name, t);
    auto [mit, m_new] = m_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = config_.beta1 * m + (1.0 - config_.beta1) * g;
    v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
    t.value().array() -= config_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + config_.eps);
  }
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer: " + s);
}

void Optimizer::step(ParamSet& params, const ParamGrads& grads) {
  if (config_.kind == OptimizerKind::sgd) {
    sgd_step(params, grads, config_.adam.lr);
  } else {
    adam_.step(params, grads);
  }
}

void clip_to_norm(ParamGrads& g, double clip) {
  const double n = global_norm(g);
  if (n <= clip || n == 0.0) return;
  const double s = clip / n;
  for (auto& [_, m] : g) m *= s;
}

ParamGrads privatize(std::span<const ParamGrads> per_sample, double clip, double noise_multiplier, Rng& rng) {
  if (!(clip > 0.0)) throw ConfigError("DP clip norm must be positive");
  if (noise_multiplier < 0.0) throw ConfigError("DP noise multiplier must be non-negative");
  if (per_sample.empty()) throw Error("privatize: no per-sample gradients");
  ParamGrads total;
  for (const auto& [name, g] : per_sample.front()) total[name] = Matrix::Zero(g.rows(), g.cols());
  for (const ParamGrads& sample : per_sample) {
    ParamGrads c = sample;
    clip_to_norm(c, clip);
    for (auto& [name, g] : c) {
      auto it = total.find(name);
      if (it == total.end()) throw Error("privatize: inconsistent parameter sets across samples");
      it->second += g;
    }
  }
  const double inv = 1.0 / static_cast<double>(per_sample.size());
  for (auto& [name, g] : total) {
    if (noise_multiplier > 0.0) g += gaussian(g.rows(), g.cols(), rng, noise_multiplier * clip);
    g *= inv;
  }
  return total;
}

void dp_sgd_step(ParamSet& params, std::span<const ParamGrads> per_sample, double clip, double noise_multiplier,
                 double lr, Rng& rng) {
  sgd_step(params, privatize(per_sample, clip, noise_multiplier, rng), lr);
}

}  // namespace icafs::nn
