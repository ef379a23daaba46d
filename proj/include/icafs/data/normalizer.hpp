#pragma once

#include <span>
#include <vector>

#include "icafs/data/table.hpp"

namespace icafs::data {

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stds;

  int modes() const { return static_cast<int>(weights.size()); }
  /// Mode with the largest posterior weight; ties go to the lower index.
  int assign(double x) const;
  double log_likelihood(std::span<const double> xs) const;
};

struct GmmOptions {
  int max_modes = 10;
  int iterations = 100;
  double tolerance = 1e-6;
  double prune_weight = 0.005;
  /// Pick the mode count in [1, max_modes] by BIC; otherwise always start from max_modes.
  bool select_modes = true;
  int selection_sample = 2000;  // 0: search on the full column
};

/// Plain EM on one column. Modes are capped by the number of distinct values.
GaussianMixture fit_gmm(std::span<const double> xs, const GmmOptions& options = {});

/// A contiguous part of an encoded row.
struct EncodedSpan {
  enum class Kind { scalar, softmax };
  int column = 0;
  int offset = 0;
  int width = 0;
  Kind kind = Kind::scalar;
};

/// A one-hot block usable as a conditioning target.
struct DiscreteBlock {
  std::string name;
  int column = -1;  // source column within the table, -1 for labels
  int offset = 0;   // offset inside the encoded row
  int width = 0;
  std::vector<double> frequencies;
};

struct ColumnNormalizer {
  ColumnKind kind = ColumnKind::continuous;
  GaussianMixture gmm;
  int cardinality = 0;

  int encoded_width() const { return kind == ColumnKind::continuous ? 1 + gmm.modes() : cardinality; }
};

/**
 * Mode-specific normalization. A continuous value becomes [scalar, mode one-hot]
 * with scalar = clip((x - mu_j) / (4 sigma_j), -1, 1) for the assigned mode j;
 * a categorical value becomes its one-hot.
 */
class TableNormalizer {
 public:
  TableNormalizer() = default;
  static TableNormalizer fit(const Matrix& x, const std::vector<ColumnMeta>& columns, const GmmOptions& options = {});

  int encoded_width() const { return width_; }
  int columns() const { return static_cast<int>(columns_.size()); }
  const ColumnNormalizer& column(int c) const { return columns_.at(static_cast<std::size_t>(c)); }
  const std::vector<EncodedSpan>& spans() const { return spans_; }
  const std::vector<DiscreteBlock>& discrete_blocks() const { return blocks_; }
  int indicator_width() const { return indicator_width_; }

  Matrix apply(const Matrix& x) const;
  /// Argmax over each one-hot block selects mode or category.
  Matrix invert(const Matrix& encoded) const;
  /// Per-row concatenation of every discrete block's one-hot (modes and categories).
  Matrix indicators(const Matrix& x) const;

 private:
  std::vector<ColumnNormalizer> columns_;
  std::vector<EncodedSpan> spans_;
  std::vector<DiscreteBlock> blocks_;
  int width_ = 0;
  int indicator_width_ = 0;
};

}  // namespace icafs::data
