#pragma once

#include <cstdint>
#include <vector>

#include "icafs/data/table.hpp"

namespace icafs::data {

struct ColumnRange {
  int begin = 0;
  int end = 0;  // exclusive
};

/// Which original columns each client holds, in recorded order.
struct PartitionLayout {
  std::vector<std::vector<int>> columns;

  int parties() const { return static_cast<int>(columns.size()); }
  int total_columns() const;
};

/// Block sizes differ by at most one; the first d mod K blocks get the extra column.
PartitionLayout equal_random_layout(int d, int k, std::uint64_t seed);
/// Ranges must be disjoint and cover [0, d).
PartitionLayout explicit_layout(int d, const std::vector<ColumnRange>& ranges);

struct FeatureBlock {
  Matrix x;
  std::vector<ColumnMeta> columns;
  std::vector<int> source_columns;

  Eigen::Index width() const { return x.cols(); }
};

/// Client feature blocks sharing sample ids; labels stay with the target (server) party.
struct VerticalSplit {
  std::vector<FeatureBlock> blocks;
  std::vector<int> y;
  int n_classes = 0;
  std::vector<std::int64_t> ids;
  int target = 0;

  int parties() const { return static_cast<int>(blocks.size()); }
  Eigen::Index rows() const { return static_cast<Eigen::Index>(ids.size()); }
  PartitionLayout layout() const;
  /// Columns placed back at their source indices.
  Matrix reconstruct() const;
  std::vector<Eigen::Index> block_widths() const;
};

VerticalSplit vertical_partition(const TabularDataset& ds, const PartitionLayout& layout);
VerticalSplit vertical_partition(const TabularDataset& ds, int k, std::uint64_t seed);

}  // namespace icafs::data
