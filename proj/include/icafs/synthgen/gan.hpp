#pragma once

#include <string>
#include <vector>

#include "icafs/data/normalizer.hpp"
#include "icafs/nn/network.hpp"
#include "icafs/nn/optim.hpp"

namespace icafs::synthgen {

using nn::Matrix;
using nn::RowVector;
using nn::Var;

enum class Topology { conv, dense };

Topology topology_from_string(const std::string& s);
std::string to_string(Topology t);

struct GanConfig {
  Topology topology = Topology::conv;
  int noise_dim = 16;
  int channels = 8;   // conv filters per layer
  int hidden = 64;    // dense width
  double slope = 0.2;
  double gumbel_tau = 0.2;
  double lambda_gp = 10.0;
  int n_critic = 5;
  nn::AdamConfig adam{1e-4, 0.5, 0.9, 1e-8};
  /// Weight of the cross-entropy pulling generated one-hot blocks toward the conditioning vector.
  double cond_weight = 1.0;
  /// Decay of the generation-time moving average of generator weights; 0 disables it.
  double ema_decay = 0.0;
  /// Minimise E[D(fake)] as literally written instead of -E[D(fake)].
  bool literal_generator_sign = false;
};

/// Smallest s with s * s >= n.
int square_side(int n);

/// Four layers: projection to an s x s grid (or dense), two hidden layers, final linear layer.
nn::MlpSpec generator_spec(int input_width, int output_width, const GanConfig& config);
/// Three hidden layers with layer-norm and leaky-relu, then a linear scalar output.
nn::MlpSpec critic_spec(int input_width, const GanConfig& config);

struct GanPair {
  nn::MlpSpec gen_spec;
  nn::MlpSpec critic_spec;
  nn::ParamSet gen;
  nn::ParamSet gen_ema;  // empty until the first generator step with ema_decay > 0
  nn::ParamSet critic;
  int noise_dim = 0;
  int cond_dim = 0;
  int data_width = 0;  // encoded output width
  double gumbel_tau = 0.2;
  std::vector<data::EncodedSpan> spans;
  /// Offsets of the one-hot span blocks inside the conditioning vector, -1 where absent.
  std::vector<int> cond_offsets;
  nn::Adam gen_opt;
  nn::Adam critic_opt;

  int critic_input_width() const { return data_width + cond_dim; }
};

/**
 * Builds a pair for encoded rows laid out by `spans`. When `cond_aligned` is set the
 * conditioning vector starts with the indicator layout of the same table, so softmax
 * spans have matching conditioning blocks; any trailing columns are unaligned.
 */
GanPair make_gan_pair(const std::vector<data::EncodedSpan>& spans, int data_width, int cond_dim, bool cond_aligned,
                      const GanConfig& config, nn::Rng& rng);

/// tanh on scalar spans; softmax (or Gumbel-softmax when rng is given) on one-hot spans.
Var output_heads(Var raw, const std::vector<data::EncodedSpan>& spans, double gumbel_tau, nn::Rng* gumbel_rng);

struct GeneratorOutput {
  Var logits;  // raw generator output cropped to the data width
  Var rows;    // after heads
};

GeneratorOutput generator_forward(const GanPair& pair, const nn::ParamNodes& gen, nn::Tape& tape, const Matrix& noise,
                                  const Matrix& cv, nn::Rng* gumbel_rng);

/// Deterministic generation (plain softmax heads), from gen_ema when it is populated.
Matrix local_generate(const GanPair& pair, const Matrix& noise, const Matrix& cv);

/// Critic value for each row of [x, cv].
Var critic_forward(const GanPair& pair, const nn::ParamNodes& critic, Var input, nn::ForwardTrace* trace = nullptr);

/// mean over rows of (||dD/dx||_2 - 1)^2 at the given critic inputs, differentiable in the critic.
Var gradient_penalty(const GanPair& pair, const nn::ParamNodes& critic, nn::Tape& tape, const Matrix& points);
double gradient_penalty(const GanPair& pair, const Matrix& points);

struct CriticStep {
  double wasserstein = 0;  // E[D(real)] - E[D(fake)]
  double penalty = 0;
  double loss = 0;         // -(wasserstein) + lambda * penalty, the minimised quantity
};

/**
 * One Adam step on the critic. real and fake are encoded rows, cv their shared
 * conditioning; interpolation weights come from rng. Returns pre-step values.
 */
CriticStep critic_step(GanPair& pair, const Matrix& real, const Matrix& fake, const Matrix& cv, double lambda_gp,
                       nn::Rng& rng);

struct GeneratorStep {
  double adversarial = 0;
  double conditional = 0;
  double loss = 0;
};

/// Generator gradients for -E[D([G(noise, cv), cv])] plus the conditional term; critic untouched.
nn::ParamGrads generator_gradients(const GanPair& pair, const Matrix& noise, const Matrix& cv, const GanConfig& config,
                                   nn::Rng* gumbel_rng, GeneratorStep* values = nullptr);

GeneratorStep generator_step(GanPair& pair, const Matrix& noise, const Matrix& cv, const GanConfig& config,
                             nn::Rng* gumbel_rng);

/// Encoded rows with one-hot spans snapped to their argmax.
Matrix snap_one_hot(const Matrix& rows, const std::vector<data::EncodedSpan>& spans);

}  // namespace icafs::synthgen
