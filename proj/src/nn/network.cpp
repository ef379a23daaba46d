#include "icafs/nn/network.hpp"

#include <cmath>

namespace icafs::nn {

namespace {

std::string layer_prefix(std::size_t i) { return "l" + std::to_string(i) + "."; }

const Var& param(const ParamNodes& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing parameter node: " + name);
  return it->second;
}

Var apply_activation(Var x, const LayerSpec& l) {
  switch (l.activation) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::leaky_relu: return leaky_relu(x, l.slope);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::softplus: return softplus(x);
  }
  return x;
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  for (auto a : {Activation::identity, Activation::relu, Activation::leaky_relu, Activation::sigmoid,
                 Activation::tanh, Activation::softplus}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown activation: " + s);
}

int MlpSpec::output_width() const {
  if (layers.empty()) return input_width;
  return layers.back().output_width();
}

void MlpSpec::validate() const {
  if (layers.empty()) throw ShapeError("network needs at least one layer");
  if (input_width <= 0) throw ShapeError("network input width must be positive");
  int in = input_width;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::dense) {
      if (l.width <= 0) throw ShapeError("dense layer width must be positive");
    } else {
      const auto& c = l.conv;
      if (c.height <= 0 || c.width <= 0 || c.in_channels <= 0 || c.out_channels <= 0) {
        throw ShapeError("conv shape must be positive");
      }
      if (c.in_size() != in) throw ShapeError("conv input size does not match previous layer");
    }
    in = l.output_width();
  }
}

MlpSpec MlpSpec::dense(int input_width, const std::vector<int>& widths, Activation hidden, Activation output,
                       Norm hidden_norm, double slope) {
  MlpSpec s;
  s.input_width = input_width;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    LayerSpec l;
    l.width = widths[i];
    const bool last = i + 1 == widths.size();
    l.activation = last ? output : hidden;
    l.norm = last ? Norm::none : hidden_norm;
    l.slope = slope;
    s.layers.push_back(l);
  }
  s.validate();
  return s;
}

ParamSet init_params(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet p;
  int in = spec.input_width;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string pre = layer_prefix(i);
    const int fan_in = l.kind == LayerKind::dense ? in : 9 * l.conv.in_channels;
    const int out = l.kind == LayerKind::dense ? l.width : l.conv.out_channels;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    p.add(pre + "weight", Tensor(uniform(fan_in, out, rng, -bound, bound)));
    p.add(pre + "bias", Tensor::vector(RowVector::Zero(out)));
    if (l.norm == Norm::layer_norm) {
      p.add(pre + "ln_gain", Tensor::vector(RowVector::Ones(l.output_width())));
      p.add(pre + "ln_bias", Tensor::vector(RowVector::Zero(l.output_width())));
    }
    in = l.output_width();
  }
  return p;
}

Var mlp_forward(const MlpSpec& spec, const ParamNodes& params, Var x, ForwardTrace* trace) {
  if (x.cols() != spec.input_width) {
    throw ShapeError("mlp_forward: input width " + std::to_string(x.cols()) + " != spec input width " +
                     std::to_string(spec.input_width));
  }
  if (trace) trace->layers.clear();
  Var h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string pre = layer_prefix(i);
    LayerTrace lt;
    lt.input = h;
    if (l.kind == LayerKind::dense) {
      lt.affine = add_row(matmul(h, param(params, pre + "weight")), param(params, pre + "bias"));
    } else {
      lt.affine = conv3x3(h, param(params, pre + "weight"), param(params, pre + "bias"), l.conv);
    }
    lt.act_input = lt.affine;
    if (l.norm == Norm::layer_norm) {
      Var mu = row_mean(lt.affine);
      Var centered = sub_col(lt.affine, mu);
      lt.inv_std = rsqrt_eps(row_mean(square(centered)), kLayerNormEps);
      lt.xhat = mul_col(centered, lt.inv_std);
      lt.act_input = add_row(mul_row(lt.xhat, param(params, pre + "ln_gain")), param(params, pre + "ln_bias"));
    }
    lt.output = apply_activation(lt.act_input, l);
    h = lt.output;
    if (trace) trace->layers.push_back(lt);
  }
  return h;
}

Matrix mlp_forward(const ParamSet& params, const MlpSpec& spec, const Matrix& x) {
  Tape tape;
  ParamNodes nodes;
  for (const auto& [name, t] : params) nodes.emplace(name, tape.constant(t.value()));
  return mlp_forward(spec, nodes, tape.constant(x)).value();
}

Var input_gradient(const MlpSpec& spec, const ParamNodes& params, const ForwardTrace& trace) {
  if (trace.layers.size() != spec.layers.size()) throw Error("input_gradient: trace does not match spec");
  Tape& tape = *trace.layers.back().output.tape();
  const Var& out = trace.layers.back().output;
  Var g = tape.constant(Matrix::Ones(out.rows(), out.cols()));
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const auto& l = spec.layers[i];
    const auto& lt = trace.layers[i];
    const std::string pre = layer_prefix(i);
    switch (l.activation) {
      case Activation::identity: break;
      case Activation::relu:
      case Activation::leaky_relu: {
        const double slope = l.activation == Activation::relu ? 0.0 : l.slope;
        const Matrix& u = lt.act_input.value();
        Matrix slopes = (u.array() >= 0.0).select(Matrix::Ones(u.rows(), u.cols()), slope);
        g = mul(g, tape.constant(std::move(slopes)));
        break;
      }
      default:
        throw Error("input_gradient: activation '" + to_string(l.activation) +
                    "' has no supported second-derivative path");
    }
    if (l.norm == Norm::layer_norm) {
      Var gh = mul_row(g, param(params, pre + "ln_gain"));
      Var m1 = row_mean(gh);
      Var m2 = row_mean(mul(gh, lt.xhat));
      g = mul_col(sub(sub_col(gh, m1), mul_col(lt.xhat, m2)), lt.inv_std);
    }
    if (l.kind == LayerKind::dense) {
      g = matmul_nt(g, param(params, pre + "weight"));
    } else {
      g = conv3x3_input_grad(g, param(params, pre + "weight"), l.conv);
    }
  }
  return g;
}

Matrix input_gradient(const ParamSet& params, const MlpSpec& spec, const Matrix& x) {
  Tape tape;
  ParamNodes nodes;
  for (const auto& [name, t] : params) nodes.emplace(name, tape.constant(t.value()));
  ForwardTrace trace;
  Var xin = tape.input(x);
  mlp_forward(spec, nodes, xin, &trace);
  return input_gradient(spec, nodes, trace).value();
}

}  // namespace icafs::nn
