#include "icafs/synthgen/gan.hpp"

#include <cmath>

namespace icafs::synthgen {

using data::EncodedSpan;
using nn::Activation;
using nn::LayerKind;
using nn::LayerSpec;
using nn::Norm;

namespace {

LayerSpec hidden_dense(int width, double slope) {
  LayerSpec l;
  l.width = width;
  l.activation = Activation::leaky_relu;
  l.slope = slope;
  l.norm = Norm::layer_norm;
  return l;
}

LayerSpec hidden_conv(int side, int in, int out, double slope) {
  LayerSpec l;
  l.kind = LayerKind::conv3x3;
  l.conv = {side, side, in, out};
  l.activation = Activation::leaky_relu;
  l.slope = slope;
  l.norm = Norm::layer_norm;
  return l;
}

Var pad_to(Var x, int width) {
  if (x.cols() == width) return x;
  return nn::concat_cols({x, x.tape()->constant(Matrix::Zero(x.rows(), width - x.cols()))});
}

Matrix concat(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

}  // namespace

Topology topology_from_string(const std::string& s) {
  if (s == "conv") return Topology::conv;
  if (s == "dense") return Topology::dense;
  throw ConfigError("unknown topology: " + s);
}

std::string to_string(Topology t) { return t == Topology::conv ? "conv" : "dense"; }

int square_side(int n) {
  int s = 1;
  while (s * s < n) ++s;
  return s;
}

nn::MlpSpec generator_spec(int input_width, int output_width, const GanConfig& c) {
  nn::MlpSpec s;
  s.input_width = input_width;
  if (c.topology == Topology::conv) {
    const int side = square_side(output_width);
    s.layers.push_back(hidden_dense(side * side * c.channels, c.slope));
    s.layers.push_back(hidden_conv(side, c.channels, c.channels, c.slope));
    s.layers.push_back(hidden_conv(side, c.channels, c.channels, c.slope));
    LayerSpec last;
    last.kind = LayerKind::conv3x3;
    last.conv = {side, side, c.channels, 1};
    s.layers.push_back(last);
  } else {
    for (int i = 0; i < 3; ++i) s.layers.push_back(hidden_dense(c.hidden, c.slope));
    LayerSpec last;
    last.width = output_width;
    s.layers.push_back(last);
  }
  s.validate();
  return s;
}

nn::MlpSpec critic_spec(int input_width, const GanConfig& c) {
  nn::MlpSpec s;
  if (c.topology == Topology::conv) {
    const int side = square_side(input_width);
    s.input_width = side * side;
    s.layers.push_back(hidden_conv(side, 1, c.channels, c.slope));
    s.layers.push_back(hidden_conv(side, c.channels, c.channels, c.slope));
    s.layers.push_back(hidden_conv(side, c.channels, c.channels, c.slope));
  } else {
    s.input_width = input_width;
    for (int i = 0; i < 3; ++i) s.layers.push_back(hidden_dense(c.hidden, c.slope));
  }
  LayerSpec out;
  out.width = 1;
  s.layers.push_back(out);
  s.validate();
  return s;
}

GanPair make_gan_pair(const std::vector<EncodedSpan>& spans, int data_width, int cond_dim, bool cond_aligned,
                      const GanConfig& config, nn::Rng& rng) {
  if (data_width < 1) throw ShapeError("gan: data width must be positive");
  if (config.noise_dim < 1) throw ConfigError("gan: noise_dim must be positive");
  GanPair p;
  p.noise_dim = config.noise_dim;
  p.cond_dim = cond_dim;
  p.data_width = data_width;
  p.gumbel_tau = config.gumbel_tau;
  p.spans = spans;
  int cv_offset = 0;
  for (const auto& s : spans) {
    if (s.offset + s.width > data_width) throw ShapeError("gan: span exceeds data width");
    if (cond_aligned && s.kind == EncodedSpan::Kind::softmax) {
      p.cond_offsets.push_back(cv_offset);
      cv_offset += s.width;
    } else {
      p.cond_offsets.push_back(-1);
    }
  }
  if (cond_aligned && cv_offset > cond_dim) throw ShapeError("gan: conditioning vector does not match one-hot spans");
  p.gen_spec = generator_spec(config.noise_dim + cond_dim, data_width, config);
  p.critic_spec = critic_spec(data_width + cond_dim, config);
  p.gen = nn::init_params(p.gen_spec, rng);
  p.critic = nn::init_params(p.critic_spec, rng);
  p.gen_opt = nn::Adam(config.adam);
  p.critic_opt = nn::Adam(config.adam);
  return p;
}

Var output_heads(Var raw, const std::vector<EncodedSpan>& spans, double gumbel_tau, nn::Rng* gumbel_rng) {
  std::vector<Var> parts;
  int expected = 0;
  for (const auto& s : spans) {
    if (s.offset != expected) throw ShapeError("output heads: spans must be contiguous");
    expected += s.width;
    Var block = nn::slice_cols(raw, s.offset, s.width);
    if (s.kind == EncodedSpan::Kind::scalar) {
      parts.push_back(nn::tanh(block));
    } else if (gumbel_rng) {
      std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
      Matrix g(block.rows(), block.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = -std::log(-std::log(u(*gumbel_rng)));
      parts.push_back(nn::row_softmax(nn::scale(nn::add(block, raw.tape()->constant(std::move(g))), 1.0 / gumbel_tau)));
    } else {
      parts.push_back(nn::row_softmax(block));
    }
  }
  if (expected != raw.cols()) throw ShapeError("output heads: spans do not cover the row");
  return nn::concat_cols(parts);
}

GeneratorOutput generator_forward(const GanPair& pair, const nn::ParamNodes& gen, nn::Tape& tape, const Matrix& noise,
                                  const Matrix& cv, nn::Rng* gumbel_rng) {
  if (noise.cols() != pair.noise_dim || cv.cols() != pair.cond_dim || noise.rows() != cv.rows()) {
    throw ShapeError("generator: noise/conditioning shape mismatch");
  }
  Var in = tape.constant(concat(noise, cv));
  Var out = nn::mlp_forward(pair.gen_spec, gen, in);
  GeneratorOutput g;
  g.logits = out.cols() == pair.data_width ? out : nn::slice_cols(out, 0, pair.data_width);
  g.rows = output_heads(g.logits, pair.spans, pair.gumbel_tau, gumbel_rng);
  return g;
}

Matrix local_generate(const GanPair& pair, const Matrix& noise, const Matrix& cv) {
  nn::Tape tape;
  nn::ParamNodes gen;
  for (const auto& [name, t] : pair.gen_ema.empty() ? pair.gen : pair.gen_ema) gen.emplace(name, tape.constant(t.value()));
  return generator_forward(pair, gen, tape, noise, cv, nullptr).rows.value();
}

Var critic_forward(const GanPair& pair, const nn::ParamNodes& critic, Var input, nn::ForwardTrace* trace) {
  if (input.cols() != pair.critic_input_width()) throw ShapeError("critic: input width mismatch");
  return nn::mlp_forward(pair.critic_spec, critic, pad_to(input, pair.critic_spec.input_width), trace);
}

Var gradient_penalty(const GanPair& pair, const nn::ParamNodes& critic, nn::Tape& tape, const Matrix& points) {
  nn::ForwardTrace trace;
  critic_forward(pair, critic, tape.input(points), &trace);
  Var g = nn::input_gradient(pair.critic_spec, critic, trace);
  if (g.cols() != points.cols()) g = nn::slice_cols(g, 0, points.cols());
  return nn::mean(nn::square(nn::add_scalar(nn::row_norm(g), -1.0)));
}

double gradient_penalty(const GanPair& pair, const Matrix& points) {
  nn::Tape tape;
  nn::ParamNodes critic;
  for (const auto& [name, t] : pair.critic) critic.emplace(name, tape.constant(t.value()));
  return gradient_penalty(pair, critic, tape, points).scalar();
}

CriticStep critic_step(GanPair& pair, const Matrix& real, const Matrix& fake, const Matrix& cv, double lambda_gp,
                       nn::Rng& rng) {
  if (real.rows() != fake.rows() || real.cols() != fake.cols() || cv.rows() != real.rows()) {
    throw ShapeError("critic_step: batch shapes differ");
  }
  if (lambda_gp < 0) throw ConfigError("critic_step: lambda_gp must be >= 0");
  const Matrix real_in = concat(real, cv), fake_in = concat(fake, cv);
  nn::Tape tape;
  nn::ParamNodes nodes = tape.bind(pair.critic);
  Var d_real = nn::mean(critic_forward(pair, nodes, tape.constant(real_in)));
  Var d_fake = nn::mean(critic_forward(pair, nodes, tape.constant(fake_in)));
  Matrix eps = nn::uniform(real.rows(), 1, rng, 0.0, 1.0);
  Matrix mix = (real_in.array().colwise() * eps.col(0).array() +
                fake_in.array().colwise() * (1.0 - eps.col(0).array())).matrix();
  CriticStep out;
  Var loss = nn::sub(d_fake, d_real);
  if (lambda_gp > 0) {
    Var gp = gradient_penalty(pair, nodes, tape, mix);
    out.penalty = gp.scalar();
    loss = nn::add(loss, nn::scale(gp, lambda_gp));
  }
  out.wasserstein = d_real.scalar() - d_fake.scalar();
  out.loss = loss.scalar();
  if (!std::isfinite(out.loss)) throw NumericError("critic_step: non-finite penalty");
  tape.backward(loss);
  pair.critic_opt.step(pair.critic, tape.grads(nodes));
  return out;
}

nn::ParamGrads generator_gradients(const GanPair& pair, const Matrix& noise, const Matrix& cv, const GanConfig& config,
                                   nn::Rng* gumbel_rng, GeneratorStep* values) {
  nn::Tape tape;
  nn::ParamNodes gen = tape.bind(pair.gen);
  nn::ParamNodes critic;
  for (const auto& [name, t] : pair.critic) critic.emplace(name, tape.constant(t.value()));
  GeneratorOutput g = generator_forward(pair, gen, tape, noise, cv, gumbel_rng);
  Var d = nn::mean(critic_forward(pair, critic, nn::concat_cols({g.rows, tape.constant(cv)})));
  Var loss = config.literal_generator_sign ? d : nn::scale(d, -1.0);
  GeneratorStep v;
  v.adversarial = loss.scalar();
  if (config.cond_weight > 0) {
    Var cond;
    bool any = false;
    for (std::size_t s = 0; s < pair.spans.size(); ++s) {
      const int off = pair.cond_offsets.empty() ? -1 : pair.cond_offsets[s];
      if (off < 0) continue;
      const auto& span = pair.spans[s];
      Matrix target = cv.middleCols(off, span.width);
      if (target.sum() == 0) continue;
      Var lsm = nn::row_log_softmax(nn::slice_cols(g.logits, span.offset, span.width));
      Var ce = nn::scale(nn::sum(nn::mul(lsm, tape.constant(std::move(target)))), -1.0 / static_cast<double>(cv.rows()));
      cond = any ? nn::add(cond, ce) : ce;
      any = true;
    }
    if (any) {
      v.conditional = cond.scalar();
      loss = nn::add(loss, nn::scale(cond, config.cond_weight));
    }
  }
  v.loss = loss.scalar();
  if (values) *values = v;
  tape.backward(loss);
  return tape.grads(gen);
}

GeneratorStep generator_step(GanPair& pair, const Matrix& noise, const Matrix& cv, const GanConfig& config,
                             nn::Rng* gumbel_rng) {
  GeneratorStep v;
  nn::ParamGrads g = generator_gradients(pair, noise, cv, config, gumbel_rng, &v);
  pair.gen_opt.step(pair.gen, g);
  if (config.ema_decay > 0) {
    if (pair.gen_ema.empty()) {
      pair.gen_ema = pair.gen;
    } else {
      for (auto& [name, t] : pair.gen_ema) {
        t.value() = config.ema_decay * t.value() + (1.0 - config.ema_decay) * pair.gen.at(name).value();
      }
    }
  }
  return v;
}

Matrix snap_one_hot(const Matrix& rows, const std::vector<EncodedSpan>& spans) {
  Matrix out = rows;
  for (const auto& s : spans) {
    if (s.kind != EncodedSpan::Kind::softmax) continue;
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      Eigen::Index best;
      rows.row(i).segment(s.offset, s.width).maxCoeff(&best);
      out.row(i).segment(s.offset, s.width).setZero();
      out(i, s.offset + best) = 1.0;
    }
  }
  return out;
}

}  // namespace icafs::synthgen
