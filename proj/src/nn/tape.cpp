#include "icafs/nn/tape.hpp"

#include <cmath>
#include <memory>
#include <sstream>

namespace icafs::nn {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("op on a detached variable");
  return *a.tape();
}

}  // namespace

const Matrix& Var::value() const {
  if (!tape_) throw Error("value of a detached variable");
  return tape_->value(*this);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on non-scalar " + shape_str(v));
  return v(0, 0);
}

// ---- Tape ----------------------------------------------------------------

void Tape::check_owned(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) {
    throw Error("detached tensor encountered: variable does not belong to this tape");
  }
}

void Tape::check_live() const {
  if (consumed_) throw Error("tape already consumed by backward");
}

Var Tape::constant(Matrix value) {
  check_live();
  if (!value.allFinite()) throw NumericError("non-finite constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::input(Matrix value) {
  check_live();
  if (!value.allFinite()) throw NumericError("non-finite input");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.op = "input";
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

ParamNodes Tape::bind(const ParamSet& params) {
  ParamNodes out;
  for (const auto& [name, t] : params) out.emplace(name, input(t.value()));
  return out;
}

Var Tape::record(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  check_live();
  bool rg = false;
  for (const Var& v : inputs) {
    check_owned(v);
    rg = rg || nodes_[v.id()].requires_grad;
  }
  if (!value.allFinite()) throw NumericError(std::string(op) + ": non-finite output");
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  n.requires_grad = rg;
  n.op = op;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id()].requires_grad;
}

Matrix Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

ParamGrads Tape::grads(const ParamNodes& nodes) const {
  ParamGrads g;
  for (const auto& [name, v] : nodes) g.emplace(name, grad(v));
  return g;
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss)));
  backward(loss, Matrix::Ones(1, 1));
}

void Tape::backward(Var output, const Matrix& seed) { backward({{output, seed}}); }

void Tape::backward(const std::vector<std::pair<Var, Matrix>>& seeds) {
  check_live();
  if (nodes_.empty()) throw Error("backward on empty tape");
  for (const auto& [v, seed] : seeds) {
    check_owned(v);
    const Matrix& val = nodes_[v.id()].value;
    if (seed.rows() != val.rows() || seed.cols() != val.cols()) {
      throw ShapeError("backward: seed " + shape_str(seed) + " does not match output " + shape_str(val));
    }
    accumulate(v, seed);
  }
  run_backward();
}

void Tape::run_backward() {
  consumed_ = true;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || !n.requires_grad || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

// ---- elementwise / linear ops ---------------------------------------------

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  Tape& t = tape_of(a);
  return t.record(a.value() * b.value(), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const Matrix& g = t.out_grad(self);
                    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
                    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
                  },
                  "matmul");
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a.value()) + " * T(" + shape_str(b.value()) + ")");
  Tape& t = tape_of(a);
  return t.record(a.value() * b.value().transpose(), {a, b},
                  [a, b](Tape& t, std::size_t self) {
                    const Matrix& g = t.out_grad(self);
                    if (t.requires_grad(a)) t.accumulate(a, g * b.value());
                    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
                  },
                  "matmul_nt");
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return tape_of(a).record(a.value() + b.value(), {a, b},
                           [a, b](Tape& t, std::size_t self) {
                             t.accumulate(a, t.out_grad(self));
                             t.accumulate(b, t.out_grad(self));
                           },
                           "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return tape_of(a).record(a.value() - b.value(), {a, b},
                           [a, b](Tape& t, std::size_t self) {
                             t.accumulate(a, t.out_grad(self));
                             t.accumulate(b, -t.out_grad(self));
                           },
                           "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {a, b},
                           [a, b](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
                             if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
                           },
                           "mul");
}

Var scale(Var a, double c) {
  return tape_of(a).record(a.value() * c, {a},
                           [a, c](Tape& t, std::size_t self) { t.accumulate(a, t.out_grad(self) * c); },
                           "scale");
}

Var add_scalar(Var a, double c) {
  return tape_of(a).record((a.value().array() + c).matrix(), {a},
                           [a](Tape& t, std::size_t self) { t.accumulate(a, t.out_grad(self)); }, "add_scalar");
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row " + shape_str(row.value()) + " for " + shape_str(a.value()));
  Matrix out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).record(std::move(out), {a, row},
                           [a, row](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             t.accumulate(a, g);
                             if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                           },
                           "add_row");
}

Var mul_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row " + shape_str(row.value()) + " for " + shape_str(a.value()));
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return tape_of(a).record(std::move(out), {a, row},
                           [a, row](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             if (t.requires_grad(a)) {
                               t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
                             }
                             if (t.requires_grad(row)) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
                           },
                           "mul_row");
}

Var add_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("add_col: col " + shape_str(col.value()) + " for " + shape_str(a.value()));
  Matrix out = a.value().colwise() + col.value().col(0);
  return tape_of(a).record(std::move(out), {a, col},
                           [a, col](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             t.accumulate(a, g);
                             if (t.requires_grad(col)) t.accumulate(col, g.rowwise().sum());
                           },
                           "add_col");
}

Var sub_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("sub_col: col " + shape_str(col.value()) + " for " + shape_str(a.value()));
  Matrix out = a.value().colwise() - col.value().col(0);
  return tape_of(a).record(std::move(out), {a, col},
                           [a, col](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             t.accumulate(a, g);
                             if (t.requires_grad(col)) t.accumulate(col, -g.rowwise().sum());
                           },
                           "sub_col");
}

Var mul_col(Var a, Var col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: col " + shape_str(col.value()) + " for " + shape_str(a.value()));
  Matrix out = a.value().array().colwise() * col.value().col(0).array();
  return tape_of(a).record(std::move(out), {a, col},
                           [a, col](Tape& t, std::size_t self) {
                             const Matrix& g = t.out_grad(self);
                             if (t.requires_grad(a)) {
                               t.accumulate(a, (g.array().colwise() * col.value().col(0).array()).matrix());
                             }
                             if (t.requires_grad(col)) t.accumulate(col, g.cwiseProduct(a.value()).rowwise().sum());
                           },
                           "mul_col");
}

Var row_sum(Var a) {
  Matrix out = a.value().rowwise().sum();
  const Eigen::Index cols = a.cols();
  return tape_of(a).record(std::move(out), {a},
                           [a, cols](Tape& t, std::size_t self) {
                             t.accumulate(a, t.out_grad(self).replicate(1, cols));
                           },
                           "row_sum");
}

Var row_norm(Var a) {
  Matrix out = a.value().rowwise().norm();
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& n = t.value(Var(&t, self));
                             const Matrix& g = t.out_grad(self);
                             Matrix ga = a.value();
                             for (Eigen::Index i = 0; i < ga.rows(); ++i) {
                               ga.row(i) *= n(i, 0) > 0.0 ? g(i, 0) / n(i, 0) : 0.0;
                             }
                             t.accumulate(a, ga);
                           },
                           "row_norm");
}

Var row_log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             const Matrix& g = t.out_grad(self);
                             const Matrix p = y.array().exp().matrix();
                             const Eigen::VectorXd gs = g.rowwise().sum();
                             t.accumulate(a, g - (p.array().colwise() * gs.array()).matrix());
                           },
                           "row_log_softmax");
}

Var row_mean(Var a) {
  const Eigen::Index cols = a.cols();
  if (cols == 0) throw ShapeError("row_mean of zero-width matrix");
  Matrix out = a.value().rowwise().mean();
  return tape_of(a).record(std::move(out), {a},
                           [a, cols](Tape& t, std::size_t self) {
                             t.accumulate(a, (t.out_grad(self) / static_cast<double>(cols)).replicate(1, cols));
                           },
                           "row_mean");
}

Var col_mean(Var a) {
  const Eigen::Index rows = a.rows();
  if (rows == 0) throw ShapeError("col_mean of empty batch");
  Matrix out = a.value().colwise().mean();
  return tape_of(a).record(std::move(out), {a},
                           [a, rows](Tape& t, std::size_t self) {
                             t.accumulate(a, (t.out_grad(self) / static_cast<double>(rows)).replicate(rows, 1));
                           },
                           "col_mean");
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).record(std::move(out), {a},
                           [a, r, c](Tape& t, std::size_t self) {
                             t.accumulate(a, Matrix::Constant(r, c, t.out_grad(self)(0, 0)));
                           },
                           "sum");
}

Var mean(Var a) {
  if (a.value().size() == 0) throw ShapeError("mean of empty matrix");
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  const Eigen::Index r = a.rows(), c = a.cols();
  const double inv = 1.0 / static_cast<double>(r * c);
  return tape_of(a).record(std::move(out), {a},
                           [a, r, c, inv](Tape& t, std::size_t self) {
                             t.accumulate(a, Matrix::Constant(r, c, t.out_grad(self)(0, 0) * inv));
                           },
                           "mean");
}

// ---- nonlinearities --------------------------------------------------------

Var relu(Var a) { return leaky_relu(a, 0.0); }

Var leaky_relu(Var a, double slope) {
  // The derivative is piecewise constant; the kink at 0 takes the positive branch.
  Matrix slopes = (a.value().array() >= 0.0).select(Matrix::Ones(a.rows(), a.cols()), slope);
  Matrix out = a.value().cwiseProduct(slopes);
  return tape_of(a).record(std::move(out), {a},
                           [a, slopes = std::move(slopes)](Tape& t, std::size_t self) {
                             t.accumulate(a, t.out_grad(self).cwiseProduct(slopes));
                           },
                           slope == 0.0 ? "relu" : "leaky_relu");
}

Var sigmoid(Var a) {
  Matrix s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return tape_of(a).record(std::move(s), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             t.accumulate(a, (t.out_grad(self).array() * y.array() * (1.0 - y.array())).matrix());
                           },
                           "sigmoid");
}

Var tanh(Var a) {
  Matrix y = a.value().array().tanh().matrix();
  return tape_of(a).record(std::move(y), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             t.accumulate(a, (t.out_grad(self).array() * (1.0 - y.array().square())).matrix());
                           },
                           "tanh");
}

Var softplus(Var a) {
  const auto& x = a.value().array();
  Matrix y = (x.max(0.0) + (-x.abs()).exp().log1p()).matrix();
  return tape_of(a).record(std::move(y), {a},
                           [a](Tape& t, std::size_t self) {
                             Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.value().array()).exp());
                             t.accumulate(a, (t.out_grad(self).array() * s).matrix());
                           },
                           "softplus");
}

Var square(Var a) {
  return tape_of(a).record(a.value().array().square().matrix(), {a},
                           [a](Tape& t, std::size_t self) {
                             t.accumulate(a, (2.0 * t.out_grad(self).array() * a.value().array()).matrix());
                           },
                           "square");
}

Var sqrt_eps(Var a, double eps) {
  if ((a.value().array() + eps).minCoeff() <= 0.0 && a.value().size() > 0) {
    throw NumericError("sqrt_eps: argument not positive");
  }
  Matrix y = (a.value().array() + eps).sqrt().matrix();
  return tape_of(a).record(std::move(y), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             t.accumulate(a, (0.5 * t.out_grad(self).array() / y.array()).matrix());
                           },
                           "sqrt_eps");
}

Var rsqrt_eps(Var a, double eps) {
  if ((a.value().array() + eps).minCoeff() <= 0.0 && a.value().size() > 0) {
    throw NumericError("rsqrt_eps: argument not positive");
  }
  Matrix y = (a.value().array() + eps).rsqrt().matrix();
  return tape_of(a).record(std::move(y), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             t.accumulate(a, (-0.5 * t.out_grad(self).array() * y.array().cube()).matrix());
                           },
                           "rsqrt_eps");
}

Var norm2(Var a, double eps) {
  Matrix out(1, 1);
  out(0, 0) = std::sqrt(a.value().squaredNorm() + eps);
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& t, std::size_t self) {
                             const double n = t.value(Var(&t, self))(0, 0);
                             if (n == 0.0) return;
                             t.accumulate(a, a.value() * (t.out_grad(self)(0, 0) / n));
                           },
                           "norm2");
}

// ---- structural -----------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape_of(parts.front())
      .record(std::move(out), parts,
              [parts](Tape& t, std::size_t self) {
                const Matrix& g = t.out_grad(self);
                Eigen::Index off = 0;
                for (const Var& p : parts) {
                  t.accumulate(p, g.middleCols(off, p.cols()));
                  off += p.cols();
                }
              },
              "concat_cols");
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index width) {
  if (begin < 0 || width < 0 || begin + width > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix out = a.value().middleCols(begin, width);
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return tape_of(a).record(std::move(out), {a},
                           [a, begin, width, rows, cols](Tape& t, std::size_t self) {
                             Matrix g = Matrix::Zero(rows, cols);
                             g.middleCols(begin, width) = t.out_grad(self);
                             t.accumulate(a, g);
                           },
                           "slice_cols");
}

Var row_softmax(Var a) {
  Matrix y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return tape_of(a).record(std::move(y), {a},
                           [a](Tape& t, std::size_t self) {
                             const Matrix& y = t.value(Var(&t, self));
                             const Matrix& g = t.out_grad(self);
                             Vector dot = g.cwiseProduct(y).rowwise().sum();
                             t.accumulate(a, (y.array() * (g.colwise() - dot).array()).matrix());
                           },
                           "row_softmax");
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Matrix& l = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != l.rows()) throw ShapeError("cross_entropy: label count != batch size");
  if (l.cols() < 2) throw ShapeError("cross_entropy: need at least 2 classes");
  Matrix probs(l.rows(), l.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= l.cols()) throw Error("cross_entropy: label out of range");
    const double m = l.row(i).maxCoeff();
    Eigen::ArrayXd e = (l.row(i).array() - m).exp();
    const double z = e.sum();
    probs.row(i) = (e / z).matrix().transpose();
    total += std::log(z) + m - l(i, y);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(l.rows());
  return tape_of(logits).record(
      std::move(out), {logits},
      [logits, labels, probs = std::move(probs)](Tape& t, std::size_t self) {
        Matrix g = probs;
        for (std::size_t i = 0; i < labels.size(); ++i) g(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
        g *= t.out_grad(self)(0, 0) / static_cast<double>(labels.size());
        t.accumulate(logits, g);
      },
      "cross_entropy");
}

// ---- convolution ----------------------------------------------------------

namespace {

// One sample's receptive fields: (H*W) x (9*C).
// Batched im2col: row i * h * w + pos holds the 3x3 neighbourhood of sample i at pos.
Matrix im2col(const Matrix& x, int h, int w, int c) {
  const RowMajor xr = x;
  const Eigen::Index n = x.rows();
  RowMajor cols = RowMajor::Zero(n * h * w, 9 * c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* xi = xr.data() + i * xr.cols();
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double* dst = cols.data() + (i * h * w + y * w + xx) * 9 * c;
        for (int k = 0; k < 9; ++k) {
          const int sy = y + k / 3 - 1;
          const int sx = xx + k % 3 - 1;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          const double* src = xi + (sy * w + sx) * c;
          for (int ci = 0; ci < c; ++ci) dst[k * c + ci] = src[ci];
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col.
Matrix col2im(const Matrix& cols_in, Eigen::Index n, int h, int w, int c) {
  const RowMajor cols = cols_in;
  RowMajor out = RowMajor::Zero(n, h * w * c);
  for (Eigen::Index i = 0; i < n; ++i) {
    double* oi = out.data() + i * out.cols();
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const double* src = cols.data() + (i * h * w + y * w + xx) * 9 * c;
        for (int k = 0; k < 9; ++k) {
          const int sy = y + k / 3 - 1;
          const int sx = xx + k % 3 - 1;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          double* dst = oi + (sy * w + sx) * c;
          for (int ci = 0; ci < c; ++ci) dst[ci] += src[k * c + ci];
        }
      }
    }
  }
  return out;
}

// n x (positions * channels) viewed as (n * positions) x channels.
Matrix to_positions(const Matrix& m, int positions, int channels) {
  const RowMajor r = m;
  return Eigen::Map<const RowMajor>(r.data(), m.rows() * positions, channels);
}

Matrix from_positions(const Matrix& p, Eigen::Index n, int width) {
  const RowMajor r = p;
  return Eigen::Map<const RowMajor>(r.data(), n, width);
}

void check_conv(Var x, Var kernel, const ConvShape& s, int x_width, const char* op) {
  if (x.cols() != x_width) throw ShapeError(std::string(op) + ": input width does not match conv shape");
  if (kernel.rows() != 9 * s.in_channels || kernel.cols() != s.out_channels) {
    throw ShapeError(std::string(op) + ": kernel must be (9*in_channels) x out_channels");
  }
}

}  // namespace

Var conv3x3(Var x, Var kernel, Var bias, const ConvShape& s) {
  check_conv(x, kernel, s, s.in_size(), "conv3x3");
  if (bias.rows() != 1 || bias.cols() != s.out_channels) throw ShapeError("conv3x3: bias must be 1 x out_channels");
  const int hw = s.height * s.width;
  const Eigen::Index n = x.rows();
  auto cols = std::make_shared<Matrix>(im2col(x.value(), s.height, s.width, s.in_channels));
  Matrix y = *cols * kernel.value();
  y.rowwise() += bias.value().row(0);
  Matrix out = from_positions(y, n, s.out_size());
  return tape_of(x).record(
      std::move(out), {x, kernel, bias},
      [x, kernel, bias, s, hw, n, cols](Tape& t, std::size_t self) {
        const Matrix g = to_positions(t.out_grad(self), hw, s.out_channels);
        t.accumulate(kernel, cols->transpose() * g);
        t.accumulate(bias, g.colwise().sum());
        if (t.requires_grad(x)) t.accumulate(x, col2im(g * kernel.value().transpose(), n, s.height, s.width, s.in_channels));
      },
      "conv3x3");
}

Var conv3x3_input_grad(Var g, Var kernel, const ConvShape& s) {
  check_conv(g, kernel, s, s.out_size(), "conv3x3_input_grad");
  const int hw = s.height * s.width;
  const Eigen::Index n = g.rows();
  const Matrix gp = to_positions(g.value(), hw, s.out_channels);
  Matrix out = col2im(gp * kernel.value().transpose(), n, s.height, s.width, s.in_channels);
  return tape_of(g).record(
      std::move(out), {g, kernel},
      [g, kernel, s, hw, n](Tape& t, std::size_t self) {
        const Matrix ucols = im2col(t.out_grad(self), s.height, s.width, s.in_channels);
        t.accumulate(g, from_positions(ucols * kernel.value(), n, s.out_size()));
        t.accumulate(kernel, ucols.transpose() * to_positions(g.value(), hw, s.out_channels));
      },
      "conv3x3_input_grad");
}

}  // namespace icafs::nn
