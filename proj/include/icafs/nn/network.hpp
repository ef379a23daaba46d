#pragma once

#include <string>
#include <vector>

#include "icafs/nn/random.hpp"
#include "icafs/nn/tape.hpp"

namespace icafs::nn {

enum class Activation { identity, relu, leaky_relu, sigmoid, tanh, softplus };
enum class Norm { none, layer_norm };
enum class LayerKind { dense, conv3x3 };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// One layer: affine map (dense or 3x3 conv), optional layer-norm, then activation.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int width = 0;  // dense output width
  ConvShape conv;  // conv3x3 only
  Activation activation = Activation::identity;
  double slope = 0.2;  // leaky_relu only
  Norm norm = Norm::none;

  int output_width() const { return kind == LayerKind::dense ? width : conv.out_size(); }
};

struct MlpSpec {
  int input_width = 0;
  std::vector<LayerSpec> layers;

  int output_width() const;
  /// Throws ShapeError on empty stacks, non-positive widths or conv shapes that do not chain.
  void validate() const;

  /// Fully connected stack; `hidden` applies to every layer but the last.
  static MlpSpec dense(int input_width, const std::vector<int>& widths, Activation hidden,
                       Activation output, Norm hidden_norm = Norm::none, double slope = 0.2);
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains.
ParamSet init_params(const MlpSpec& spec, Rng& rng);

struct LayerTrace {
  Var input;
  Var affine;
  Var act_input;  // after normalization
  Var xhat;       // layer-norm only
  Var inv_std;    // layer-norm only
  Var output;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

Var mlp_forward(const MlpSpec& spec, const ParamNodes& params, Var x, ForwardTrace* trace = nullptr);

/// Tape-free evaluation.
Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& x);

/**
 * Gradient of sum(D(x)) with respect to the network input, built from recorded
 * ops so that functions of it (a gradient penalty) are differentiable in the
 * network parameters.
 *
 * Supported activations: identity, relu and leaky_relu, whose derivative is
 * treated as piecewise constant. Others throw.
 */
Var input_gradient(const MlpSpec& spec, const ParamNodes& params, const ForwardTrace& trace);

Matrix input_gradient(const ParamSet& params, const MlpSpec& spec, const Matrix& x);

}  // namespace icafs::nn
