#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "icafs/data/partition.hpp"
#include "icafs/synthgen/stage1.hpp"
#include "icafs/vfl/runtime.hpp"

namespace icafs::bench {

using Json = nlohmann::ordered_json;

/// Either a CSV + schema pair on disk or a named generator.
struct DatasetConfig {
  std::string path;
  std::string schema;  // defaults to <path without .csv>.json
  /// "", "tpr_benchmark", "gaussian_mixture_toy", "rendered_digits" or "usps".
  std::string preset;
  int n = 1000;
  int d = 20;
  std::vector<int> relevant;  // tpr_benchmark; default {0..3}
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
};

struct PartitionConfig {
  std::string strategy = "equal_random";  // or "explicit"
  std::uint64_t seed = 0;
  std::vector<data::ColumnRange> ranges;
};

struct Stage1Settings {
  int T1 = 300;
  double lambda_gp = 10.0;
  int n_synth = 0;
  /// Directory written by save_synthetic; Stage 1 is skipped when set.
  std::string synthetic_path;
  int batch = 64;
  std::string topology = "conv";
  double lr = 1e-4;
  int n_critic = 5;
  int noise_dim = 16;
  int hidden = 64;
  int channels = 8;
  double ema_decay = 0.0;
  std::string local_cv = "row_modes";
  std::string global_cv = "sampled";
  int max_modes = 10;
  /// BIC mode count per column; false fits max_modes and prunes light modes.
  bool select_modes = true;
};

struct DpSettings {
  bool enabled = false;
  double clip = 1.0;
  double noise_multiplier = 0.0;
  /// When set, noise_multiplier is calibrated to reach (target_epsilon, delta).
  std::optional<double> target_epsilon;
  double delta = 1e-5;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  int K = 2;
  PartitionConfig partition;
  int N = 5;
  double beta = 1.2;
  double gamma = 100.0;
  int T = 200;
  double lr = 0.003;
  int batch = 64;
  Stage1Settings stage1;
  std::string variant = "icafs";
  vfl::EncoderConfig encoder;
  std::string optimizer = "adam";
  std::string clamp_gradient = "straight_through";
  std::string mask_mode = "per_sample";
  bool strict = false;
  DpSettings dp;
  double noise_fraction = 0.0;
  std::uint64_t seed = 0;
  int repeats = 3;
  int workers = 1;

  /// Throws ConfigError on bad values and DataError when a referenced file is missing.
  void validate() const;
};

/// Unknown keys are rejected.
ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

vfl::TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed);
synthgen::Stage1Config stage1_config(const ExperimentConfig& c, std::uint64_t seed);

/// Dataset after noise injection, split into train and test and partitioned.
struct PreparedData {
  data::VerticalSplit train;
  data::VerticalSplit test;
  std::vector<int> relevant;  // empty when unknown
  std::vector<std::string> column_names;
};

PreparedData prepare_data(const ExperimentConfig& c);

struct RunRecord {
  std::uint64_t seed = 0;
  double accuracy = 0;
  std::optional<double> tpr;
  std::optional<double> noise_selection_rate;
  std::optional<double> clean_selection_rate;
  std::vector<double> loss_syn;
  std::vector<double> loss_real;
  double stage1_seconds = 0;
  double stage2_seconds = 0;
  double stage3_seconds = 0;
  std::uint64_t message_bytes = 0;
  std::vector<std::pair<std::string, std::uint64_t>> bytes_by_kind;
  std::size_t violations = 0;
  std::string selection_csv;
  std::string checkpoint;
};

/// One configuration of a suite: its labels (variant, N, beta, ...) and its repeats.
struct Cell {
  Json labels = Json::object();
  Json extra = Json::object();  // e.g. calibrated sigma, unreachable budgets
  std::vector<RunRecord> runs;

  double mean_accuracy() const;
  double std_accuracy() const;  // population std; 0 for a single run
  std::optional<double> mean_tpr() const;
};

struct Report {
  std::string kind = "experiment";
  Json fingerprint = Json::object();
  std::vector<Cell> cells;
};

struct RunOptions {
  /// Selection CSVs, checkpoints and message logs go here when set.
  std::filesystem::path out_dir;
  bool keep_checkpoints = false;
};

Report run_experiment(const ExperimentConfig& config, const RunOptions& options = {});
/// icafs, fixed-temp, embedding-mlp and no-fs with shared seeds.
Report run_ablation(const ExperimentConfig& base, const RunOptions& options = {});
Report run_sweep(const ExperimentConfig& config, const std::vector<int>& Ns, const std::vector<double>& betas,
                 const RunOptions& options = {});
Report run_noise_suite(const ExperimentConfig& config, const std::vector<double>& fractions,
                       const RunOptions& options = {});
/// Budgets use infinity for the non-private run.
Report run_dp_suite(const ExperimentConfig& config, const std::vector<double>& epsilons, double delta,
                    const RunOptions& options = {});

/// RDP of one sampled-Gaussian step (sampling rate q, noise multiplier sigma) at integer order alpha >= 2.
double rdp_order(double q, double sigma, int alpha);
/// Renyi-DP accountant for the sampled Gaussian mechanism (integer orders 2..256).
double rdp_epsilon(double q, double sigma, long steps, double delta);
/// Smallest sigma reaching epsilon; nullopt when no sigma up to the search bound does.
std::optional<double> calibrate_sigma(double q, long steps, double epsilon, double delta);

enum class ReportFormat { json, csv };
ReportFormat report_format_from_string(const std::string& s);

Json report_json(const Report& r);
/// Inverse of report_json.
Report report_from_json(const Json& j);
/// Header: label columns, runs, mean_accuracy, std_accuracy, mean_tpr.
std::string report_csv(const Report& r);
/// Throws "no runs" when a cell has no repeats; creates parent directories.
void emit_report(const Report& r, ReportFormat format, const std::filesystem::path& path);

/// Labels plus mean/std accuracy per cell, read back from either emitted format.
struct AccuracyTable {
  std::vector<std::string> label_columns;
  std::vector<std::vector<std::string>> labels;
  std::vector<int> runs;
  std::vector<double> mean;
  std::vector<double> std;

  bool operator==(const AccuracyTable&) const = default;
};

AccuracyTable accuracy_table(const Report& r);
AccuracyTable read_accuracy_table(const std::filesystem::path& path);

}  // namespace icafs::bench
