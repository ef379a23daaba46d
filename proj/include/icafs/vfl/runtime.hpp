#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "icafs/data/partition.hpp"
#include "icafs/gates/gates.hpp"
#include "icafs/nn/network.hpp"
#include "icafs/nn/optim.hpp"
#include "icafs/nn/serialize.hpp"
#include "icafs/synthgen/stage1.hpp"
#include "icafs/vfl/message.hpp"

namespace icafs::vfl {

using nn::Matrix;
using nn::RowVector;
using nn::Var;

enum class EncoderKind {
  mlp,          // three ReLU layers
  featurewise,  // z_j = softplus(a_j x_j + b_j), one output per input column
  identity,
  softplus,     // z_j = softplus(x_j), no parameters
};

/// Selection variants compared in the ablation study.
enum class Variant {
  icafs,          // annealed learnable gates
  fixed_temp,     // gates with tau == 1
  embedding_mlp,  // alpha = sigmoid(MLP(z)) per selector
  no_fs,          // alpha == 1
};

/// Inference masks: per sample (hard gate on each z) or one fixed mask per selector.
enum class MaskMode { per_sample, aggregated };

EncoderKind encoder_kind_from_string(const std::string& s);
std::string to_string(EncoderKind k);
Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);
MaskMode mask_mode_from_string(const std::string& s);
std::string to_string(MaskMode m);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::mlp;
  int hidden = 64;
  int output = 16;  // d'_k for the mlp encoder
};

struct DpConfig {
  bool enabled = false;
  double clip = 1.0;
  double noise_multiplier = 0.0;
};

struct TrainConfig {
  int epochs = 200;
  int batch = 64;
  int selectors = 5;
  double beta = 1.2;
  double gamma = 100.0;
  double lr = 0.003;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
  Variant variant = Variant::icafs;
  EncoderConfig encoder;
  int selector_hidden = 32;  // embedding_mlp only
  gates::ClampGradient clamp = gates::ClampGradient::straight_through;
  double gate_init_std = 0.1;
  /// Block the Stage-3 embedding-gradient channel; encoders then stay fixed in Stage 3.
  bool strict = false;
  MaskMode mask_mode = MaskMode::per_sample;
  DpConfig dp;  // Stage 3 only
  std::uint64_t seed = 0;
  int workers = 1;

  nlohmann::ordered_json fingerprint() const;
};

struct ClientParty {
  int id = 0;
  EncoderKind kind = EncoderKind::mlp;
  nn::MlpSpec spec;  // mlp only
  int input_width = 0;
  int output_width = 0;
  nn::ParamSet encoder;
  nn::Optimizer optimizer;

  /// z_k for a batch of this client's rows.
  Var forward(const nn::ParamNodes& params, Var x) const;
  Matrix forward(const Matrix& x) const;
};

ClientParty make_client(int id, int input_width, const EncoderConfig& config, const nn::OptimizerConfig& optimizer,
                        nn::Rng& rng);

/**
 * Label holder: N selectors (gate vector or selector MLP) and N linear heads.
 * Selector parameters sit in their own ParamSet so Stage 3 can prove they are
 * untouched.
 */
struct ServerParty {
  int n_classes = 0;
  int width = 0;  // p
  int selectors = 0;
  Variant variant = Variant::icafs;
  gates::ClampGradient clamp = gates::ClampGradient::straight_through;
  std::vector<gates::Slice> slices;
  nn::ParamSet heads;         // h<n>.weight (p x C), h<n>.bias
  nn::ParamSet selector;      // g<n>.w, or s<n>.l*.* for embedding_mlp
  std::vector<RowVector> w0;  // per selector, gates only
  nn::MlpSpec selector_spec;  // embedding_mlp only
  std::vector<RowVector> fixed_masks;  // aggregated mask mode, filled after training
  nn::Optimizer head_optimizer;
  nn::Optimizer selector_optimizer;

  std::vector<gates::GateParams> gate_params() const;
};

ServerParty make_server(int n_classes, const std::vector<gates::Slice>& slices, const TrainConfig& config, nn::Rng& rng);

struct Slices {
  std::vector<gates::Slice> slices;
  int width = 0;
};

Slices slice_map(const std::vector<int>& widths);

/// Client-order concatenation; throws ShapeError on batch mismatch.
Matrix concat_embeddings(const std::vector<Matrix>& z, Slices* map = nullptr);
/// Inverse of concat_embeddings: each client's columns.
std::vector<Matrix> scatter_embeddings(const Matrix& z, const Slices& map);

enum class GateMode { soft, hard };

struct EnsembleTrace {
  Var logits;                // summed over selectors
  std::vector<Var> alphas;   // per selector
  std::vector<Var> selected; // per selector, s^n
};

/// Recorded ensemble forward. For soft mode tau is the current temperature.
EnsembleTrace ensemble_forward(const ServerParty& server, const nn::ParamNodes& heads, const nn::ParamNodes& selector,
                               Var z, GateMode mode, double tau, MaskMode masks = MaskMode::per_sample);

struct Prediction {
  Matrix logits;
  Matrix probabilities;
  std::vector<int> labels;
};

Prediction ensemble_predict(const ServerParty& server, const Matrix& z, GateMode mode, double tau = 1.0,
                            MaskMode masks = MaskMode::per_sample);

/// Split-learning simulator state for one training run.
struct Federation {
  TrainConfig config;
  std::vector<ClientParty> clients;
  ServerParty server;
  gates::TemperatureSchedule schedule;
  MessageLog* log = nullptr;
  int round = 0;
};

Federation make_federation(const data::VerticalSplit& real, const TrainConfig& config, MessageLog* log = nullptr);

struct EpochStats {
  double loss = 0;
  double prediction = 0;  // cross-entropy part
  double penalty = 0;     // Stage 2 only
  double tau = 1;
  std::uint64_t gate_checksum_before = 0;
  std::uint64_t gate_checksum_after = 0;
};

/// One pass over the synthetic rows: soft gates at tau(t), loss CE + beta * sum ||mean alpha||.
EpochStats stage2_epoch(Federation& f, const synthgen::SyntheticDataset& synth, int epoch);
/// One pass over the real rows with hard masks; selector parameters must stay bit-identical.
EpochStats stage3_epoch(Federation& f, const data::VerticalSplit& real, int epoch);

struct TrainedModel {
  std::vector<ClientParty> clients;
  ServerParty server;
  gates::TemperatureSchedule schedule;
  int epochs_run = 0;
  nlohmann::ordered_json fingerprint;

  std::vector<nn::Section> sections() const;
  void save(const std::filesystem::path& path) const;
  std::string checkpoint_bytes() const;
};

/// Rebuilds a model from a checkpoint written by TrainedModel::save with the same config.
TrainedModel load_model(const std::filesystem::path& path, const data::VerticalSplit& schema,
                        const TrainConfig& config);

struct TrainResult {
  TrainedModel model;
  std::vector<EpochStats> stage2;
  std::vector<EpochStats> stage3;
  double stage2_seconds = 0;
  double stage3_seconds = 0;
};

/// For t = 0..T-1: stage2_epoch then stage3_epoch.
TrainResult train(const data::VerticalSplit& real, const synthgen::SyntheticDataset& synth, const TrainConfig& config,
                  MessageLog* log = nullptr);

/// Embeddings of all rows in client order.
Matrix embed(const std::vector<ClientParty>& clients, const data::VerticalSplit& split);

struct Evaluation {
  double accuracy = 0;
  std::vector<double> per_class;
  std::optional<double> tpr;
  gates::Selection selection;
  std::vector<int> selected_columns;  // source columns, featurewise/identity encoders only
  std::vector<int> predictions;
};

/// Hard-gate accuracy on `test`. TPR is reported when `relevant` is given and embeddings map to columns.
Evaluation evaluate(const TrainedModel& model, const data::VerticalSplit& test,
                    const std::vector<int>* relevant = nullptr, MaskMode masks = MaskMode::per_sample);

/// Per-selector selection frequency computed on `split`; used for aggregated masks and reporting.
gates::Selection model_selection(const TrainedModel& model, const data::VerticalSplit& split);

struct Violation {
  std::size_t index = 0;  // record position in the log
  std::string rule;
  std::string detail;
};

struct AuditOptions {
  bool strict = false;
  /// Real split used for the content check (payload columns compared to real features and labels).
  const data::VerticalSplit* real = nullptr;
  double tolerance = 1e-12;
};

std::vector<Violation> audit_messages(const MessageLog& log, const AuditOptions& options = {});

}  // namespace icafs::vfl
