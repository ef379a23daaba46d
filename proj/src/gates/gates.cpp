#include "icafs/gates/gates.hpp"

#include <fstream>
#include <set>

namespace icafs::gates {

double temperature(double t, double total, double gamma) {
  if (gamma < 1.0) throw ConfigError("temperature: gamma must be >= 1");
  if (total < 1.0) throw ConfigError("temperature: T must be >= 1");
  if (t < 0 || t > total) throw ConfigError("temperature: t outside [0, T]");
  return std::pow(gamma, t / total);
}

ClampGradient clamp_gradient_from_string(const std::string& s) {
  if (s == "straight_through") return ClampGradient::straight_through;
  if (s == "zero") return ClampGradient::zero;
  throw ConfigError("unknown clamp_gradient: " + s);
}

GateParams::GateParams(RowVector w_, RowVector w0, int index) : w(std::move(w_)), w0_(std::move(w0)), index_(index) {
  if (w.size() != w0_.size()) throw ShapeError("gate: w and w0 widths differ");
}

GateParams GateParams::init(int p, nn::Rng& rng, int index, double stddev) {
  RowVector w = nn::gaussian(1, p, rng, stddev);
  return GateParams(w, w, index);
}

double gate_penalty(const std::vector<Matrix>& alphas, double beta) {
  if (beta < 0) throw ConfigError("gate penalty: beta must be >= 0");
  double total = 0;
  for (const auto& a : alphas) total += a.colwise().mean().norm();
  return beta * total;
}

Var soft_gate(Var z, Var w, const RowVector& w0, double tau, ClampGradient rule) {
  if (w.rows() != 1 || w.cols() != z.cols() || w0.size() != z.cols()) throw ShapeError("soft_gate: width mismatch");
  const Matrix& zv = z.value();
  const Matrix& wv = w.value();
  Matrix raw = raw_soft_gate(zv, wv, w0, tau);
  // d alpha / d u with u = tau w z, masked where the clamp is active and the rule says so.
  Matrix slope(zv.rows(), zv.cols());
  for (Eigen::Index j = 0; j < zv.cols(); ++j) {
    const double denom = logistic(w0(j));
    for (Eigen::Index i = 0; i < zv.rows(); ++i) {
      const double s = logistic(tau * wv(0, j) * zv(i, j));
      const bool clamped = raw(i, j) > 1.0;
      slope(i, j) = (rule == ClampGradient::zero && clamped) ? 0.0 : s * (1.0 - s) / denom;
    }
  }
  Matrix alpha = raw.cwiseMin(1.0);
  return z.tape()->record(std::move(alpha), {z, w},
                          [z, w, tau, slope = std::move(slope)](nn::Tape& t, std::size_t self) {
                            const Matrix gu = t.out_grad(self).cwiseProduct(slope) * tau;
                            t.accumulate(z, (gu.array().rowwise() * w.value().row(0).array()).matrix());
                            t.accumulate(w, gu.cwiseProduct(z.value()).colwise().sum());
                          },
                          "soft_gate");
}

Var select(Var z, Var alpha) {
  if (alpha.rows() != z.rows() || alpha.cols() != z.cols()) throw ShapeError("select: alpha and z shapes differ");
  Var zbar = nn::row_mean(z);
  return nn::add_col(nn::mul(alpha, nn::sub_col(z, zbar)), zbar);
}

Var gate_penalty(const std::vector<Var>& alphas, double beta) {
  if (beta < 0) throw ConfigError("gate penalty: beta must be >= 0");
  if (alphas.empty()) throw ShapeError("gate penalty: no selectors");
  Var total = nn::norm2(nn::col_mean(alphas.front()));
  for (std::size_t n = 1; n < alphas.size(); ++n) total = nn::add(total, nn::norm2(nn::col_mean(alphas[n])));
  return nn::scale(total, beta);
}

RowVector FeatureMask::slice(int client) const {
  for (const auto& s : slices) {
    if (s.client == client) return m.segment(s.begin, s.width);
  }
  throw ShapeError("mask: unknown client " + std::to_string(client));
}

FeatureMask make_mask(const RowVector& m, const std::vector<Slice>& slices) {
  int total = 0;
  for (const auto& s : slices) {
    if (s.begin != total) throw ShapeError("mask: slices must be contiguous in client order");
    total += s.width;
  }
  if (total != m.size()) throw ShapeError("mask: slice widths do not cover the mask");
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (m(i) != 0.0 && m(i) != 1.0) throw ShapeError("mask: entries must be 0 or 1");
  }
  return {m, slices};
}

Selection selected_set(const std::vector<GateParams>& gates, const Matrix& z) {
  if (z.rows() == 0) throw DataError("selected_set: empty dataset");
  Selection s;
  std::set<int> all;
  for (const auto& g : gates) {
    RowVector f = hard_gate(z, g).colwise().mean();
    std::vector<int> chosen;
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      if (f(i) > 0.5) {
        chosen.push_back(static_cast<int>(i));
        all.insert(static_cast<int>(i));
      }
    }
    s.frequency.push_back(std::move(f));
    s.chosen.push_back(std::move(chosen));
  }
  s.ensemble.assign(all.begin(), all.end());
  return s;
}

void write_selection_csv(const Selection& s, const std::vector<Slice>& slices, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "selector,embedding_index,client,client_index,frequency\n";
  for (std::size_t n = 0; n < s.frequency.size(); ++n) {
    for (Eigen::Index i = 0; i < s.frequency[n].size(); ++i) {
      int client = -1, local = -1;
      for (const auto& sl : slices) {
        if (i >= sl.begin && i < sl.begin + sl.width) {
          client = sl.client;
          local = static_cast<int>(i) - sl.begin;
        }
      }
      out << n << ',' << i << ',' << client << ',' << local << ',' << s.frequency[n](i) << '\n';
    }
  }
}

}  // namespace icafs::gates
