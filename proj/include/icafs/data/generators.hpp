#pragma once

#include <filesystem>
#include <vector>

#include "icafs/data/table.hpp"
#include "icafs/nn/random.hpp"

namespace icafs::data {

/// Appends ceil(f d / (1 - f)) standard-Gaussian columns flagged as noise.
TabularDataset inject_noise_features(const TabularDataset& ds, double fraction, nn::Rng& rng);
int noise_column_count(int d, double fraction);

struct TprOptions {
  int n_classes = 2;
  double label_noise = 0.1;
  /// Weights on the relevant columns; random signs with magnitude in [0.5, 1.5] when empty.
  std::vector<double> weights;
};

struct TprBenchmark {
  TabularDataset ds;
  std::vector<int> relevant;
};

/**
 * Columns are independent standard Gaussians; labels threshold a noisy linear
 * score of the relevant columns (at 0 for two classes, at score quantiles otherwise).
 */
TprBenchmark make_tpr_benchmark(int n, int d, const std::vector<int>& relevant, nn::Rng& rng,
                                const TprOptions& options = {});

void write_ground_truth(const std::vector<int>& relevant, const std::filesystem::path& path);
std::vector<int> read_ground_truth(const std::filesystem::path& path);

/**
 * Three-column toy for Stage-1 checks: a bimodal continuous column, a
 * 3-category column with frequencies (0.5, 0.3, 0.2), a unimodal continuous
 * column; balanced binary label tied to the first column's mode.
 */
TabularDataset gaussian_mixture_toy(int n, nn::Rng& rng);

/// 16x16 grey-level digit renderings (256 columns, 10 classes) with random shifts, strokes and pixel noise.
TabularDataset rendered_digits(int n, nn::Rng& rng);

}  // namespace icafs::data
