#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "icafs/nn/tensor.hpp"

namespace icafs::nn {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; never owns data.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using ParamNodes = std::map<std::string, Var>;

/**
 * Reverse-mode recording of matrix-valued ops.
 *
 * Every op appends one node; backward walks nodes in exact reverse order of
 * recording. A tape is single-use: after backward() it is consumed and any
 * further recording or backward call throws.
 *
 * Higher-order gradients are built explicitly: an op's derivative can itself
 * be expressed with recorded ops (see input_gradient in network.hpp), and the
 * resulting nodes are differentiated like any other.
 */
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Matrix value);
  Var input(Matrix value);
  ParamNodes bind(const ParamSet& params);

  Var record(Matrix value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  const Matrix& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Accumulated gradient; zeros of the node's shape when nothing flowed in.
  Matrix grad(Var v) const;
  ParamGrads grads(const ParamNodes& nodes) const;

  void backward(Var loss);
  void backward(Var output, const Matrix& seed);
  void backward(const std::vector<std::pair<Var, Matrix>>& seeds);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  // Used inside backward functions.
  const Matrix& out_grad(std::size_t id) const { return nodes_[id].grad; }
  template <typename Derived>
  void accumulate(Var input, const Eigen::MatrixBase<Derived>& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    const char* op = "leaf";
    bool requires_grad = false;
  };

  void check_owned(Var v) const;
  void check_live() const;
  void run_backward();

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename Derived>
void Tape::accumulate(Var input, const Eigen::MatrixBase<Derived>& g) {
  Node& node = nodes_[input.id()];
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

// ---- ops -----------------------------------------------------------------
// All ops record onto the tape owning their first argument.

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

/// a + broadcast(row), row is 1 x cols(a)
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
/// a op broadcast(col), col is rows(a) x 1
Var add_col(Var a, Var col);
Var sub_col(Var a, Var col);
Var mul_col(Var a, Var col);

Var row_sum(Var a);
/// Euclidean norm of each row, rows x 1; zero rows get zero gradient.
Var row_norm(Var a);
Var row_mean(Var a);
Var col_mean(Var a);
Var sum(Var a);
Var mean(Var a);

Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var sigmoid(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var square(Var a);
/// sqrt(a + eps)
Var sqrt_eps(Var a, double eps);
/// 1 / sqrt(a + eps)
Var rsqrt_eps(Var a, double eps);
/// Frobenius norm, 1 x 1.
Var norm2(Var a, double eps = 0.0);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index width);
Var row_softmax(Var a);
Var row_log_softmax(Var a);

/// Mean softmax cross-entropy over rows; labels are class indices.
Var cross_entropy(Var logits, const std::vector<int>& labels);

struct ConvShape {
  int height = 1;
  int width = 1;
  int in_channels = 1;
  int out_channels = 1;
  int in_size() const { return height * width * in_channels; }
  int out_size() const { return height * width * out_channels; }
};

/**
 * 3x3 stride-1 zero-padded convolution over rows laid out as
 * (y * width + x) * channels + c. Kernel is (9 * in_channels) x out_channels,
 * bias is 1 x out_channels.
 */
Var conv3x3(Var x, Var kernel, Var bias, const ConvShape& shape);
/// Adjoint of conv3x3 with respect to its input, itself differentiable in g and kernel.
Var conv3x3_input_grad(Var g, Var kernel, const ConvShape& shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

}  // namespace icafs::nn
