#include "icafs/data/normalizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace icafs::data {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double log_normal(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return -0.5 * (z * z + kLog2Pi) - std::log(sd);
}

void sort_by_mean(GaussianMixture& g) {
  std::vector<std::size_t> order(g.weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return g.means[a] < g.means[b]; });
  GaussianMixture s;
  for (auto i : order) {
    s.weights.push_back(g.weights[i]);
    s.means.push_back(g.means[i]);
    s.stds.push_back(g.stds[i]);
  }
  g = std::move(s);
}

int argmax_block(const Matrix& m, Eigen::Index row, int offset, int width) {
  int best = 0;
  for (int j = 1; j < width; ++j) {
    if (m(row, offset + j) > m(row, offset + best)) best = j;
  }
  return best;
}

}  // namespace

int GaussianMixture::assign(double x) const {
  int best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < modes(); ++j) {
    const double lp = std::log(weights[static_cast<std::size_t>(j)]) +
                      log_normal(x, means[static_cast<std::size_t>(j)], stds[static_cast<std::size_t>(j)]);
    if (lp > best_lp) {
      best_lp = lp;
      best = j;
    }
  }
  return best;
}

double GaussianMixture::log_likelihood(std::span<const double> xs) const {
  double total = 0;
  std::vector<double> lp(weights.size());
  for (double x : xs) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < weights.size(); ++j) {
      lp[j] = std::log(weights[j]) + log_normal(x, means[j], stds[j]);
      mx = std::max(mx, lp[j]);
    }
    double s = 0;
    for (double v : lp) s += std::exp(v - mx);
    total += mx + std::log(s);
  }
  return total;
}

namespace {

/// EM with exactly m quantile-initialised modes, then pruning.
GaussianMixture em_fixed(std::span<const double> xs, const std::vector<double>& sorted, int m, double scale,
                         const GmmOptions& options) {
  const std::size_t n = xs.size();
  const double sd_floor = 1e-3 * scale;
  GaussianMixture g;
  if (m == 1) {
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    g.weights = {1.0};
    g.means = {mean};
    g.stds = {std::max(std::sqrt(var / static_cast<double>(n)), sd_floor)};
    return g;
  }
  for (int j = 0; j < m; ++j) {
    const double q = (j + 0.5) / m;
    g.means.push_back(sorted[std::min(n - 1, static_cast<std::size_t>(q * static_cast<double>(n)))]);
    g.stds.push_back(scale);
    g.weights.push_back(1.0 / m);
  }

  std::vector<double> resp(n * static_cast<std::size_t>(m));
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < options.iterations; ++it) {
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < m; ++j) {
        double& r = resp[i * m + j];
        r = std::log(g.weights[j]) + log_normal(xs[i], g.means[j], g.stds[j]);
        mx = std::max(mx, r);
      }
      double s = 0;
      for (int j = 0; j < m; ++j) s += std::exp(resp[i * m + j] - mx);
      const double lse = mx + std::log(s);
      ll += lse;
      for (int j = 0; j < m; ++j) resp[i * m + j] = std::exp(resp[i * m + j] - lse);
    }
    for (int j = 0; j < m; ++j) {
      double nk = 0, mu = 0;
      for (std::size_t i = 0; i < n; ++i) {
        nk += resp[i * m + j];
        mu += resp[i * m + j] * xs[i];
      }
      nk = std::max(nk, 1e-12);
      mu /= nk;
      double v = 0;
      for (std::size_t i = 0; i < n; ++i) v += resp[i * m + j] * (xs[i] - mu) * (xs[i] - mu);
      g.weights[j] = std::max(nk / static_cast<double>(n), 1e-300);
      g.means[j] = mu;
      g.stds[j] = std::max(std::sqrt(v / nk), sd_floor);
    }
    const double avg = ll / static_cast<double>(n);
    if (std::abs(avg - prev) < options.tolerance) break;
    prev = avg;
  }

  GaussianMixture kept;
  for (int j = 0; j < m; ++j) {
    if (g.weights[j] >= options.prune_weight) {
      kept.weights.push_back(g.weights[j]);
      kept.means.push_back(g.means[j]);
      kept.stds.push_back(g.stds[j]);
    }
  }
  if (kept.weights.empty()) {
    const auto j = static_cast<std::size_t>(std::max_element(g.weights.begin(), g.weights.end()) - g.weights.begin());
    kept.weights = {1.0};
    kept.means = {g.means[j]};
    kept.stds = {g.stds[j]};
  }
  const double total = std::accumulate(kept.weights.begin(), kept.weights.end(), 0.0);
  for (double& w : kept.weights) w /= total;
  sort_by_mean(kept);
  return kept;
}

double bic(const GaussianMixture& g, std::span<const double> xs) {
  const double params = 3.0 * g.modes() - 1.0;
  return -2.0 * g.log_likelihood(xs) + params * std::log(static_cast<double>(xs.size()));
}

}  // namespace

GaussianMixture fit_gmm(std::span<const double> xs, const GmmOptions& options) {
  const std::size_t n = xs.size();
  if (n == 0) throw DataError("cannot fit a mixture to an empty column");
  if (options.max_modes < 1) throw DataError("max_modes must be >= 1");
  std::vector<double> sorted(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = static_cast<int>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  sorted.assign(xs.begin(), xs.end());
  std::sort(sorted.begin(), sorted.end());

  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(n);
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double scale = var > 0 ? std::sqrt(var) : 1.0;

  const int cap = std::min(options.max_modes, distinct);
  if (cap == 1 || !options.select_modes) return em_fixed(xs, sorted, cap, scale, options);

  // Choose the mode count on an evenly strided subsample, then refit on everything.
  std::span<const double> probe = xs;
  std::vector<double> sub, sub_sorted;
  if (options.selection_sample > 0 && n > static_cast<std::size_t>(options.selection_sample)) {
    const double stride = static_cast<double>(n) / options.selection_sample;
    for (int i = 0; i < options.selection_sample; ++i) sub.push_back(xs[static_cast<std::size_t>(i * stride)]);
    sub_sorted = sub;
    std::sort(sub_sorted.begin(), sub_sorted.end());
    probe = sub;
  }
  const std::vector<double>& probe_sorted = sub.empty() ? sorted : sub_sorted;
  int best_m = 1;
  double best = std::numeric_limits<double>::infinity();
  for (int m = 1; m <= cap; ++m) {
    const double score = bic(em_fixed(probe, probe_sorted, m, scale, options), probe);
    if (score < best) {
      best = score;
      best_m = m;
    }
  }
  return em_fixed(xs, sorted, best_m, scale, options);
}

TableNormalizer TableNormalizer::fit(const Matrix& x, const std::vector<ColumnMeta>& columns, const GmmOptions& options) {
  if (x.cols() != static_cast<Eigen::Index>(columns.size())) throw ShapeError("normalizer: column metadata mismatch");
  if (x.rows() == 0) throw DataError("normalizer: empty dataset");
  TableNormalizer t;
  int offset = 0;
  int ind_offset = 0;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    ColumnNormalizer cn;
    cn.kind = columns[c].kind;
    std::vector<double> values(x.col(static_cast<Eigen::Index>(c)).data(),
                               x.col(static_cast<Eigen::Index>(c)).data() + x.rows());
    DiscreteBlock block;
    block.name = columns[c].name;
    block.column = static_cast<int>(c);
    if (cn.kind == ColumnKind::continuous) {
      cn.gmm = fit_gmm(values, options);
      t.spans_.push_back({static_cast<int>(c), offset, 1, EncodedSpan::Kind::scalar});
      t.spans_.push_back({static_cast<int>(c), offset + 1, cn.gmm.modes(), EncodedSpan::Kind::softmax});
      block.width = cn.gmm.modes();
      block.frequencies.assign(static_cast<std::size_t>(block.width), 0.0);
      for (double v : values) block.frequencies[static_cast<std::size_t>(cn.gmm.assign(v))] += 1;
    } else {
      cn.cardinality = columns[c].cardinality();
      if (cn.cardinality < 2) throw DataError("categorical column '" + columns[c].name + "' needs >= 2 categories");
      t.spans_.push_back({static_cast<int>(c), offset, cn.cardinality, EncodedSpan::Kind::softmax});
      block.width = cn.cardinality;
      block.frequencies.assign(static_cast<std::size_t>(block.width), 0.0);
      for (double v : values) block.frequencies[static_cast<std::size_t>(v)] += 1;
    }
    for (double& f : block.frequencies) f /= static_cast<double>(x.rows());
    block.offset = ind_offset;
    ind_offset += block.width;
    offset += cn.encoded_width();
    t.blocks_.push_back(std::move(block));
    t.columns_.push_back(std::move(cn));
  }
  t.width_ = offset;
  t.indicator_width_ = ind_offset;
  return t;
}

Matrix TableNormalizer::apply(const Matrix& x) const {
  if (x.cols() != columns()) throw ShapeError("normalizer: width mismatch");
  Matrix out = Matrix::Zero(x.rows(), width_);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int offset = 0;
    for (int c = 0; c < columns(); ++c) {
      const auto& cn = columns_[static_cast<std::size_t>(c)];
      const double v = x(i, c);
      if (cn.kind == ColumnKind::continuous) {
        const int j = cn.gmm.assign(v);
        const double s = (v - cn.gmm.means[static_cast<std::size_t>(j)]) / (4.0 * cn.gmm.stds[static_cast<std::size_t>(j)]);
        out(i, offset) = std::clamp(s, -1.0, 1.0);
        out(i, offset + 1 + j) = 1.0;
      } else {
        const int k = static_cast<int>(v);
        if (k < 0 || k >= cn.cardinality) throw DataError("normalizer: category index out of range");
        out(i, offset + k) = 1.0;
      }
      offset += cn.encoded_width();
    }
  }
  return out;
}

Matrix TableNormalizer::invert(const Matrix& encoded) const {
  if (encoded.cols() != width_) throw ShapeError("normalizer: encoded width mismatch");
  Matrix out(encoded.rows(), columns());
  for (Eigen::Index i = 0; i < encoded.rows(); ++i) {
    int offset = 0;
    for (int c = 0; c < columns(); ++c) {
      const auto& cn = columns_[static_cast<std::size_t>(c)];
      if (cn.kind == ColumnKind::continuous) {
        const auto j = static_cast<std::size_t>(argmax_block(encoded, i, offset + 1, cn.gmm.modes()));
        const double s = std::clamp(encoded(i, offset), -1.0, 1.0);
        out(i, c) = 4.0 * cn.gmm.stds[j] * s + cn.gmm.means[j];
      } else {
        out(i, c) = argmax_block(encoded, i, offset, cn.cardinality);
      }
      offset += cn.encoded_width();
    }
  }
  return out;
}

Matrix TableNormalizer::indicators(const Matrix& x) const {
  if (x.cols() != columns()) throw ShapeError("normalizer: width mismatch");
  Matrix out = Matrix::Zero(x.rows(), indicator_width_);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (int c = 0; c < columns(); ++c) {
      const auto& cn = columns_[static_cast<std::size_t>(c)];
      const int k = cn.kind == ColumnKind::continuous ? cn.gmm.assign(x(i, c)) : static_cast<int>(x(i, c));
      out(i, blocks_[static_cast<std::size_t>(c)].offset + k) = 1.0;
    }
  }
  return out;
}

}  // namespace icafs::data
