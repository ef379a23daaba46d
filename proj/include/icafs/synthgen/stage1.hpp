#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "icafs/data/partition.hpp"
#include "icafs/synthgen/gan.hpp"
#include "icafs/vfl/message.hpp"

namespace icafs::synthgen {

/// How a client builds the conditioning vector for its local generator.
enum class LocalCv {
  row_modes,      // every mode/category indicator of the aligned real row
  single_column,  // one randomly chosen column's indicator of the aligned real row
};

LocalCv local_cv_from_string(const std::string& s);
std::string to_string(LocalCv v);

/// Conditioning of the server's global generator during training.
enum class GlobalCv {
  label,    // label one-hot only
  sampled,  // per row, one block drawn uniformly from the uploaded one-hot spans and the label
};

GlobalCv global_cv_from_string(const std::string& s);
std::string to_string(GlobalCv v);

struct Stage1Config {
  int iterations = 300;
  int batch = 64;
  GanConfig gan;
  int n_synth = 0;  // 0: training-set size
  LocalCv local_cv = LocalCv::row_modes;
  GlobalCv global_cv = GlobalCv::sampled;
  std::uint64_t seed = 0;
  int workers = 1;
  data::GmmOptions gmm;
  double divergence_limit = 1e6;
};

/// Generated client blocks in raw feature space plus server-held labels.
struct SyntheticDataset {
  std::vector<Matrix> blocks;
  std::vector<std::vector<data::ColumnMeta>> columns;
  std::vector<int> y;
  int n_classes = 0;
  nlohmann::ordered_json fingerprint;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(y.size()); }
  int parties() const { return static_cast<int>(blocks.size()); }
  /// Throws DataError unless block widths, row counts and labels are consistent with `split`.
  void validate_against(const data::VerticalSplit& split) const;
};

/// CSV per block (block_<k>.csv), labels.csv and fingerprint.json inside `dir`.
void save_synthetic(const SyntheticDataset& s, const std::filesystem::path& dir);
SyntheticDataset load_synthetic(const std::filesystem::path& dir);

/// [x~_1, ..., x~_K, one_hot(y~)] in client order.
Matrix server_aggregate(const std::vector<Matrix>& blocks, const std::vector<int>& labels, int n_classes);

struct FeatureFidelity {
  std::string name;
  data::ColumnKind kind = data::ColumnKind::continuous;
  double real_mean = 0, synth_mean = 0;
  double real_std = 0, synth_std = 0;
  double w1 = 0;
  std::vector<double> real_freq, synth_freq;  // categorical only
  double max_freq_gap = 0;
};

struct FidelityReport {
  std::vector<FeatureFidelity> features;
  nlohmann::ordered_json to_json() const;
};

/// 1-Wasserstein distance between two empirical distributions.
double wasserstein1(std::span<const double> a, std::span<const double> b);

FidelityReport fidelity_report(const std::vector<data::ColumnMeta>& real_columns, const Matrix& real,
                               const std::vector<data::ColumnMeta>& synth_columns, const Matrix& synth);
FidelityReport fidelity_report(const data::VerticalSplit& real, const SyntheticDataset& synth);

struct Stage1Trace {
  std::vector<double> local_critic;   // mean over clients, one per iteration
  std::vector<double> global_critic;  // one per iteration
  std::vector<double> global_generator;
};

struct Stage1Result {
  SyntheticDataset synthetic;
  FidelityReport fidelity;
  Stage1Trace trace;
  double seconds = 0;
};

/**
 * Each iteration: the server broadcasts batch ids; every client trains its
 * local pair on its own rows and uploads generated rows for those ids; the
 * server trains the global pair on the aggregated rows with its own labels.
 * Finally the global generator produces class-balanced rows that are split
 * back to the clients and decoded there.
 */
Stage1Result run_stage1(const data::VerticalSplit& split, const Stage1Config& config, vfl::MessageLog* log = nullptr);

}  // namespace icafs::synthgen
