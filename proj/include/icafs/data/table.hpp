#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icafs/nn/tensor.hpp"

namespace icafs::data {

using nn::Matrix;
using nn::RowVector;

enum class ColumnKind { continuous, categorical };

struct ColumnMeta {
  std::string name;
  ColumnKind kind = ColumnKind::continuous;
  std::vector<std::string> categories;  // categorical only; values are stored as indices
  bool noise = false;                   // injected noise column

  int cardinality() const { return static_cast<int>(categories.size()); }
};

/// Aligned samples: one row per sample, categorical cells hold category indices.
struct TabularDataset {
  Matrix x;
  std::vector<int> y;
  int n_classes = 0;
  std::vector<std::string> class_names;
  std::string label_name = "label";
  std::vector<ColumnMeta> columns;
  std::vector<std::int64_t> ids;

  Eigen::Index rows() const { return x.rows(); }
  Eigen::Index cols() const { return x.cols(); }

  /// Throws DataError when fields disagree on row or column counts or labels fall outside [0, n_classes).
  void validate() const;
  TabularDataset select_rows(const std::vector<Eigen::Index>& rows) const;
  std::vector<int> class_counts() const;
};

/// Default ids 0..n-1, class names "0".."k-1".
void fill_defaults(TabularDataset& ds);

/**
 * CSV with a header row plus a JSON schema sidecar mapping each column name to
 * {"kind": "continuous"|"categorical", "label": bool}. Exactly one label column.
 */
TabularDataset load_table(const std::filesystem::path& csv, const std::filesystem::path& schema);
void save_table(const TabularDataset& ds, const std::filesystem::path& csv, const std::filesystem::path& schema);

/// Fraction-stratified split by label; both parts keep ascending row order.
struct TrainTest {
  TabularDataset train;
  TabularDataset test;
};
TrainTest stratified_split(const TabularDataset& ds, double test_fraction, std::uint64_t seed);

}  // namespace icafs::data
