#include "icafs/data/partition.hpp"

#include <algorithm>
#include <numeric>

#include "icafs/nn/random.hpp"

namespace icafs::data {

int PartitionLayout::total_columns() const {
  int n = 0;
  for (const auto& c : columns) n += static_cast<int>(c.size());
  return n;
}

PartitionLayout equal_random_layout(int d, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("vertical partition needs K >= 2");
  if (k > d) throw DataError("cannot split " + std::to_string(d) + " columns across " + std::to_string(k) + " clients");
  std::vector<int> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  nn::Rng rng = nn::derive_rng(seed, {0x9a27});
  std::shuffle(perm.begin(), perm.end(), rng);
  PartitionLayout layout;
  std::size_t pos = 0;
  for (int b = 0; b < k; ++b) {
    const std::size_t size = static_cast<std::size_t>(d / k + (b < d % k ? 1 : 0));
    std::vector<int> cols(perm.begin() + static_cast<std::ptrdiff_t>(pos), perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(cols.begin(), cols.end());
    layout.columns.push_back(std::move(cols));
    pos += size;
  }
  return layout;
}

PartitionLayout explicit_layout(int d, const std::vector<ColumnRange>& ranges) {
  if (ranges.empty()) throw DataError("explicit partition needs at least one range");
  std::vector<int> owner(static_cast<std::size_t>(d), -1);
  PartitionLayout layout;
  for (std::size_t b = 0; b < ranges.size(); ++b) {
    const auto& r = ranges[b];
    if (r.begin < 0 || r.end > d || r.begin >= r.end) throw DataError("column range out of bounds or empty");
    std::vector<int> cols;
    for (int c = r.begin; c < r.end; ++c) {
      if (owner[static_cast<std::size_t>(c)] >= 0) throw DataError("column ranges overlap at column " + std::to_string(c));
      owner[static_cast<std::size_t>(c)] = static_cast<int>(b);
      cols.push_back(c);
    }
    layout.columns.push_back(std::move(cols));
  }
  if (std::find(owner.begin(), owner.end(), -1) != owner.end()) throw DataError("column ranges do not cover every column");
  return layout;
}

PartitionLayout VerticalSplit::layout() const {
  PartitionLayout l;
  for (const auto& b : blocks) l.columns.push_back(b.source_columns);
  return l;
}

Matrix VerticalSplit::reconstruct() const {
  int d = 0;
  for (const auto& b : blocks) d += static_cast<int>(b.width());
  Matrix x(rows(), d);
  for (const auto& b : blocks) {
    for (std::size_t j = 0; j < b.source_columns.size(); ++j) x.col(b.source_columns[j]) = b.x.col(static_cast<Eigen::Index>(j));
  }
  return x;
}

std::vector<Eigen::Index> VerticalSplit::block_widths() const {
  std::vector<Eigen::Index> w;
  for (const auto& b : blocks) w.push_back(b.width());
  return w;
}

VerticalSplit vertical_partition(const TabularDataset& ds, const PartitionLayout& layout) {
  if (layout.total_columns() != ds.cols()) throw DataError("partition layout does not match dataset width");
  std::vector<bool> seen(static_cast<std::size_t>(ds.cols()), false);
  VerticalSplit split;
  for (const auto& cols : layout.columns) {
    if (cols.empty()) throw DataError("partition block is empty");
    FeatureBlock b;
    b.source_columns = cols;
    b.x.resize(ds.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const int c = cols[j];
      if (c < 0 || c >= ds.cols() || seen[static_cast<std::size_t>(c)]) throw DataError("partition blocks overlap or exceed the table");
      seen[static_cast<std::size_t>(c)] = true;
      b.x.col(static_cast<Eigen::Index>(j)) = ds.x.col(c);
      b.columns.push_back(ds.columns[static_cast<std::size_t>(c)]);
    }
    split.blocks.push_back(std::move(b));
  }
  split.y = ds.y;
  split.n_classes = ds.n_classes;
  split.ids = ds.ids;
  return split;
}

VerticalSplit vertical_partition(const TabularDataset& ds, int k, std::uint64_t seed) {
  return vertical_partition(ds, equal_random_layout(static_cast<int>(ds.cols()), k, seed));
}

}  // namespace icafs::data
