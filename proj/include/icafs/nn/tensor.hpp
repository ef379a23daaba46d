#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "icafs/error.hpp"

namespace icafs::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

/**
 * Dense 64-bit value of rank 1 or 2.
 *
 * Rank-1 tensors are stored as a single row so that biases broadcast over the
 * batch dimension without reshaping. The rank is kept separately because the
 * snapshot format records it.
 */
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, int rank = 2);
  static Tensor vector(const RowVector& v) { return Tensor(Matrix(v), 1); }

  int rank() const { return rank_; }
  std::vector<std::size_t> shape() const;
  std::size_t size() const { return static_cast<std::size_t>(value_.size()); }

  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }

  bool operator==(const Tensor& other) const;

 private:
  Matrix value_;
  int rank_ = 2;
};

/// Named parameter tensors. Iteration is in sorted name order.
class ParamSet {
 public:
  void add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  bool empty() const { return entries_.empty(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  bool operator==(const ParamSet& other) const { return entries_ == other.entries_; }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

 private:
  std::map<std::string, Tensor> entries_;
};

/// Gradients keyed by parameter name, same shapes as the owning ParamSet.
using ParamGrads = std::map<std::string, Matrix>;

ParamGrads zeros_like(const ParamSet& params);

bool all_finite(const Matrix& m);

}  // namespace icafs::nn
