#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "icafs/nn/random.hpp"
#include "icafs/nn/tape.hpp"

namespace icafs::gates {

using nn::Matrix;
using nn::RowVector;
using nn::Var;

/// tau = gamma^(t / T).
double temperature(double t, double total, double gamma);

struct TemperatureSchedule {
  double gamma = 100.0;
  int total = 200;
  bool fixed = false;  // tau == 1 throughout

  double at(int t) const { return fixed ? 1.0 : temperature(t, total, gamma); }
};

/// Backward rule where sigma(tau w z) / sigma(w0) exceeds 1.
enum class ClampGradient { straight_through, zero };

ClampGradient clamp_gradient_from_string(const std::string& s);

/// One selector's gate vector. w0 is fixed at construction.
class GateParams {
 public:
  GateParams() = default;
  GateParams(RowVector w, RowVector w0, int index = 0);
  /// w ~ N(0, stddev^2), w0 = initial w.
  static GateParams init(int p, nn::Rng& rng, int index = 0, double stddev = 0.1);

  int width() const { return static_cast<int>(w.size()); }
  const RowVector& w0() const { return w0_; }
  int index() const { return index_; }

  RowVector w;

 private:
  RowVector w0_;
  int index_ = 0;
};

inline double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// ---- value-level gate algebra ----------------------------------------------
// Rows of z are samples, columns embedding components.

/// sigma(tau w_i z_i) / sigma(w0_i), before clamping.
template <typename DerivedZ, typename DerivedW, typename DerivedW0>
Matrix raw_soft_gate(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedW>& w,
                     const Eigen::MatrixBase<DerivedW0>& w0, double tau) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double denom = logistic(w0(j));
    for (Eigen::Index i = 0; i < z.rows(); ++i) out(i, j) = logistic(tau * w(j) * z(i, j)) / denom;
  }
  return out;
}

template <typename DerivedZ, typename DerivedW, typename DerivedW0>
Matrix soft_gate(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedW>& w,
                 const Eigen::MatrixBase<DerivedW0>& w0, double tau) {
  return raw_soft_gate(z, w, w0, tau).cwiseMin(1.0).cwiseMax(0.0);
}

inline Matrix soft_gate(const Matrix& z, const GateParams& g, double tau) { return soft_gate(z, g.w, g.w0(), tau); }

/// 1(w_i z_i > 0), strict.
template <typename DerivedZ, typename DerivedW>
Matrix hard_gate(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedW>& w) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) out(i, j) = w(j) * z(i, j) > 0.0 ? 1.0 : 0.0;
  return out;
}

inline Matrix hard_gate(const Matrix& z, const GateParams& g) { return hard_gate(z, g.w); }

/// s_i = alpha_i z_i + (1 - alpha_i) mean(z), the mean taken over the row.
template <typename DerivedZ, typename DerivedA>
Matrix select(const Eigen::MatrixBase<DerivedZ>& z, const Eigen::MatrixBase<DerivedA>& alpha) {
  if (alpha.rows() != z.rows() || alpha.cols() != z.cols()) throw ShapeError("select: alpha and z shapes differ");
  const Eigen::VectorXd zbar = z.rowwise().mean();
  Matrix s(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) s(i, j) = alpha(i, j) * z(i, j) + (1.0 - alpha(i, j)) * zbar(i);
  return s;
}

/// beta * sum_n || batch-mean of alpha^n ||_2.
double gate_penalty(const std::vector<Matrix>& alphas, double beta);

// ---- recorded ops ----------------------------------------------------------

/// Differentiable in z and w; see ClampGradient for the clamped region.
Var soft_gate(Var z, Var w, const RowVector& w0, double tau, ClampGradient rule = ClampGradient::straight_through);
Var select(Var z, Var alpha);
Var gate_penalty(const std::vector<Var>& alphas, double beta);

// ---- masks and reporting ---------------------------------------------------

struct Slice {
  int client = 0;
  int begin = 0;
  int width = 0;
};

struct FeatureMask {
  RowVector m;
  std::vector<Slice> slices;

  RowVector slice(int client) const;
};

FeatureMask make_mask(const RowVector& m, const std::vector<Slice>& slices);

struct Selection {
  std::vector<RowVector> frequency;      // per selector, hard-gate frequency per embedding index
  std::vector<std::vector<int>> chosen;  // per selector, indices with frequency > 0.5
  std::vector<int> ensemble;             // union over selectors, ascending
};

Selection selected_set(const std::vector<GateParams>& gates, const Matrix& z);

/// Columns selector, embedding_index, client, client_index, frequency.
void write_selection_csv(const Selection& s, const std::vector<Slice>& slices, const std::filesystem::path& path);

}  // namespace icafs::gates
