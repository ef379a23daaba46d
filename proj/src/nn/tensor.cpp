#include "icafs/nn/tensor.hpp"

#include <cstring>

namespace icafs::nn {

Tensor::Tensor(Matrix value, int rank) : value_(std::move(value)), rank_(rank) {
  if (rank != 1 && rank != 2) throw ShapeError("tensor rank must be 1 or 2");
  if (rank == 1 && value_.rows() != 1) throw ShapeError("rank-1 tensor must be stored as a single row");
}

std::vector<std::size_t> Tensor::shape() const {
  if (rank_ == 1) return {static_cast<std::size_t>(value_.cols())};
  return {static_cast<std::size_t>(value_.rows()), static_cast<std::size_t>(value_.cols())};
}

bool Tensor::operator==(const Tensor& other) const {
  return rank_ == other.rank_ && value_.rows() == other.value_.rows() &&
         value_.cols() == other.value_.cols() &&
         std::memcmp(value_.data(), other.value_.data(), sizeof(double) * value_.size()) == 0;
}

void ParamSet::add(const std::string& name, Tensor t) {
  if (!entries_.emplace(name, std::move(t)).second) throw Error("duplicate parameter name: " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

namespace {
void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}
}  // namespace

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : entries_) {
    fnv(h, name.data(), name.size());
    for (auto d : t.shape()) fnv(h, &d, sizeof(d));
    fnv(h, t.value().data(), sizeof(double) * t.size());
  }
  return h;
}

ParamGrads zeros_like(const ParamSet& params) {
  ParamGrads g;
  for (const auto& [name, t] : params) g[name] = Matrix::Zero(t.value().rows(), t.value().cols());
  return g;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace icafs::nn
