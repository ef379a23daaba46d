#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "icafs/nn/grad_check.hpp"
#include "icafs/nn/loss.hpp"
#include "icafs/nn/network.hpp"
#include "icafs/nn/optim.hpp"
#include "icafs/nn/serialize.hpp"

using namespace icafs;
using namespace icafs::nn;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (auto r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Straight-line dense forward pass: plain loops, no tape and no Eigen products.
std::vector<double> reference_dense_forward(const ParamSet& p, const MlpSpec& spec, std::vector<double> x) {
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const Matrix& w = p.at("l" + std::to_string(l) + ".weight").value();
    const Matrix& b = p.at("l" + std::to_string(l) + ".bias").value();
    std::vector<double> y(static_cast<std::size_t>(w.cols()), 0.0);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      double acc = b(0, j);
      for (Eigen::Index i = 0; i < w.rows(); ++i) acc += x[static_cast<std::size_t>(i)] * w(i, j);
      if (spec.layers[l].activation == Activation::relu) acc = acc > 0 ? acc : 0.0;
      y[static_cast<std::size_t>(j)] = acc;
    }
    x = y;
  }
  return x;
}

MlpSpec critic_spec(int in) {
  MlpSpec s = MlpSpec::dense(in, {6, 5, 4, 1}, Activation::leaky_relu, Activation::identity, Norm::layer_norm);
  return s;
}

}  // namespace

TEST_CASE("mlp_forward identity and affine cases") {
  MlpSpec id = MlpSpec::dense(2, {2}, Activation::identity, Activation::identity);
  ParamSet p;
  p.add("l0.weight", Tensor(Matrix::Identity(2, 2)));
  p.add("l0.bias", Tensor::vector(RowVector::Zero(2)));
  CHECK(mlp_forward(p, id, mat({{1, 2}})) == mat({{1, 2}}));

  MlpSpec aff = MlpSpec::dense(1, {1}, Activation::identity, Activation::identity);
  ParamSet q;
  q.add("l0.weight", Tensor(mat({{2}})));
  q.add("l0.bias", Tensor::vector(RowVector::Constant(1, 1.0)));
  CHECK(mlp_forward(q, aff, mat({{3}}))(0, 0) == 7.0);
}

TEST_CASE("mlp_forward matches a straight-line evaluation") {
  Rng rng(0);
  MlpSpec spec = MlpSpec::dense(5, {8, 8, 3}, Activation::relu, Activation::identity);
  ParamSet p = init_params(spec, rng);
  for (auto& [name, t] : p) t.value() = gaussian(t.value().rows(), t.value().cols(), rng, 0.7);
  Matrix x = gaussian(4, 5, rng);
  Matrix y = mlp_forward(p, spec, x);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<double> xr(x.row(r).data(), x.row(r).data() + 0);
    for (Eigen::Index c = 0; c < x.cols(); ++c) xr.push_back(x(r, c));
    auto ref = reference_dense_forward(p, spec, xr);
    for (Eigen::Index c = 0; c < y.cols(); ++c) CHECK(y(r, c) == doctest::Approx(ref[c]).epsilon(1e-12));
  }
}

TEST_CASE("mlp_forward rejects width mismatch") {
  Rng rng(1);
  MlpSpec spec = MlpSpec::dense(3, {2}, Activation::relu, Activation::identity);
  ParamSet p = init_params(spec, rng);
  CHECK_THROWS_AS(mlp_forward(p, spec, Matrix::Zero(1, 4)), ShapeError);
  CHECK_THROWS_AS(MlpSpec::dense(3, {}, Activation::relu, Activation::identity), ShapeError);
}

TEST_CASE("backward trivial cases") {
  {
    Tape t;
    Var w = t.input(mat({{1, 1}}));
    Var x = t.input(mat({{2}, {3}}));
    Var loss = sum(matmul(w, x));
    t.backward(loss);
    CHECK(t.grad(x) == mat({{1}, {1}}));
    CHECK(t.grad(w) == mat({{2, 3}}));
  }
  {
    Tape t;
    Var u = t.input(mat({{0}}));
    t.backward(sigmoid(u));
    CHECK(t.grad(u)(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  }
}

TEST_CASE("backward error paths") {
  Tape t;
  Var a = t.input(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(a), ShapeError);
  Tape other;
  Var b = other.input(Matrix::Ones(2, 2));
  CHECK_THROWS(add(a, b));
  Tape t2;
  Var c = t2.input(Matrix::Ones(1, 1));
  t2.backward(c);
  CHECK(t2.consumed());
  CHECK_THROWS(t2.backward(c));
  Tape empty;
  CHECK_THROWS(empty.backward(Var(&empty, 0)));
}

TEST_CASE("non-finite values are rejected") {
  Tape t;
  Matrix m = Matrix::Ones(1, 2);
  m(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(t.input(m), NumericError);
  Var a = t.input(Matrix::Constant(1, 1, 1e200));
  CHECK_THROWS_AS(mul(a, a), NumericError);
}

TEST_CASE("random 3-layer MLP cross-entropy gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    MlpSpec spec = MlpSpec::dense(4, {7, 7, 3}, Activation::relu, Activation::identity);
    ParamSet p = init_params(spec, rng);
    Matrix x = gaussian(6, 4, rng);
    std::vector<int> y = {0, 1, 2, 1, 0, 2};
    ScalarFn f = [&](Tape& t, const ParamNodes& n) { return cross_entropy(mlp_forward(spec, n, t.constant(x)), y); };
    CHECK(grad_check(f, p, 1e-5) < 1e-4);
  }
}

TEST_CASE("layer-norm, leaky, sigmoid, tanh and softplus paths match finite differences") {
  Rng rng(11);
  for (Activation a : {Activation::leaky_relu, Activation::sigmoid, Activation::tanh, Activation::softplus}) {
    MlpSpec spec = MlpSpec::dense(3, {5, 4, 2}, a, Activation::identity, Norm::layer_norm);
    ParamSet p = init_params(spec, rng);
    Matrix x = gaussian(5, 3, rng);
    ScalarFn f = [&](Tape& t, const ParamNodes& n) {
      return cross_entropy(mlp_forward(spec, n, t.constant(x)), {0, 1, 1, 0, 1});
    };
    CHECK(grad_check(f, p, 1e-5) < 1e-4);
  }
}

TEST_CASE("input_gradient trivial critics") {
  MlpSpec lin = MlpSpec::dense(2, {1}, Activation::identity, Activation::identity);
  ParamSet p;
  p.add("l0.weight", Tensor(mat({{1}, {-2}})));
  p.add("l0.bias", Tensor::vector(RowVector::Zero(1)));
  Rng rng(3);
  Matrix x = gaussian(5, 2, rng);
  Matrix g = input_gradient(p, lin, x);
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK(g(i, 0) == 1.0);
    CHECK(g(i, 1) == -2.0);
  }

  MlpSpec leaky;
  leaky.input_width = 1;
  LayerSpec l;
  l.width = 1;
  l.activation = Activation::leaky_relu;
  l.slope = 0.2;
  leaky.layers.push_back(l);
  ParamSet q;
  q.add("l0.weight", Tensor(mat({{1}})));
  q.add("l0.bias", Tensor::vector(RowVector::Zero(1)));
  CHECK(input_gradient(q, leaky, mat({{-1}}))(0, 0) == doctest::Approx(0.2));
  // The kink takes the positive branch.
  CHECK(input_gradient(q, leaky, mat({{0}}))(0, 0) == 1.0);

  MlpSpec sig = MlpSpec::dense(2, {1}, Activation::sigmoid, Activation::sigmoid);
  ParamSet r = init_params(sig, rng);
  CHECK_THROWS(input_gradient(r, sig, x));
}

TEST_CASE("4-layer critic input gradient matches finite differences") {
  Rng rng(5);
  MlpSpec spec = critic_spec(3);
  ParamSet p = init_params(spec, rng);
  Matrix x = gaussian(4, 3, rng);
  Matrix g = input_gradient(p, spec, x);
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    RowVector fd(3);
    for (int j = 0; j < 3; ++j) {
      Matrix xp = x.row(i), xm = x.row(i);
      xp(0, j) += h;
      xm(0, j) -= h;
      fd(j) = (mlp_forward(p, spec, xp)(0, 0) - mlp_forward(p, spec, xm)(0, 0)) / (2 * h);
    }
    const double rel = std::abs(g.row(i).norm() - fd.norm()) / fd.norm();
    CHECK(rel < 1e-3);
    CHECK((g.row(i) - fd).norm() / fd.norm() < 1e-3);
  }
}

TEST_CASE("conv critic input gradient matches finite differences") {
  Rng rng(9);
  MlpSpec spec;
  spec.input_width = 9;
  LayerSpec c1;
  c1.kind = LayerKind::conv3x3;
  c1.conv = {3, 3, 1, 2};
  c1.norm = Norm::layer_norm;
  c1.activation = Activation::leaky_relu;
  LayerSpec c2 = c1;
  c2.conv = {3, 3, 2, 2};
  LayerSpec out;
  out.width = 1;
  spec.layers = {c1, c2, out};
  ParamSet p = init_params(spec, rng);
  Matrix x = gaussian(3, 9, rng);
  Matrix g = input_gradient(p, spec, x);
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    RowVector fd(9);
    for (int j = 0; j < 9; ++j) {
      Matrix xp = x.row(i), xm = x.row(i);
      xp(0, j) += h;
      xm(0, j) -= h;
      fd(j) = (mlp_forward(p, spec, xp)(0, 0) - mlp_forward(p, spec, xm)(0, 0)) / (2 * h);
    }
    CHECK((g.row(i) - fd).norm() / fd.norm() < 1e-3);
  }
  ScalarFn f = [&](Tape& t, const ParamNodes& n) {
    return mean(mlp_forward(spec, n, t.constant(x)));
  };
  CHECK(grad_check(f, p) < 1e-4);
}

TEST_CASE("gradient penalty is differentiable in critic parameters") {
  Rng rng(21);
  for (bool conv : {false, true}) {
    MlpSpec spec;
    if (conv) {
      spec.input_width = 4;
      LayerSpec c;
      c.kind = LayerKind::conv3x3;
      c.conv = {2, 2, 1, 3};
      c.norm = Norm::layer_norm;
      c.activation = Activation::leaky_relu;
      LayerSpec o;
      o.width = 1;
      spec.layers = {c, o};
    } else {
      spec = critic_spec(4);
    }
    ParamSet p = init_params(spec, rng);
    Matrix x = gaussian(5, 4, rng);
    ScalarFn penalty = [&](Tape& t, const ParamNodes& n) {
      ForwardTrace tr;
      mlp_forward(spec, n, t.input(x), &tr);
      Var g = input_gradient(spec, n, tr);
      Var norms = sqrt_eps(row_sum(square(g)), 1e-12);
      return mean(square(add_scalar(norms, -1.0)));
    };
    CHECK(grad_check(penalty, p, 1e-5) < 1e-4);
  }
}

TEST_CASE("cross_entropy_softmax values") {
  CHECK(cross_entropy_softmax(RowVector::Zero(2), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  RowVector big(2);
  big << 1000, 0;
  CHECK(cross_entropy_softmax(big, 0) == doctest::Approx(0.0));
  CHECK(std::isfinite(cross_entropy_softmax(big, 1)));
  CHECK_THROWS(cross_entropy_softmax(big, 2));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    RowVector l = gaussian(1, 10, rng, 3.0);
    const int y = trial % 10;
    long double z = 0;
    for (int j = 0; j < 10; ++j) z += std::exp(static_cast<long double>(l(j)));
    const long double ref = -std::log(std::exp(static_cast<long double>(l(y))) / z);
    CHECK(cross_entropy_softmax(l, y) == doctest::Approx(static_cast<double>(ref)).epsilon(1e-12));
    Tape t;
    CHECK(cross_entropy_softmax(t.constant(l), y).scalar() == doctest::Approx(static_cast<double>(ref)).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy never produces NaN for |logits| <= 1e6") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix l = uniform(3, 4, rng, -1e6, 1e6);
    Tape t;
    Var x = t.input(l);
    Var loss = cross_entropy(x, {0, 3, 2});
    CHECK(std::isfinite(loss.scalar()));
    t.backward(loss);
    CHECK(t.grad(x).allFinite());
  }
}

TEST_CASE("sgd_step") {
  ParamSet p;
  p.add("p", Tensor(mat({{1}})));
  sgd_step(p, {{"p", mat({{2}})}}, 0.5);
  CHECK(p.at("p").value()(0, 0) == 0.0);
  ParamSet q = p;
  sgd_step(q, {{"p", mat({{7}})}}, 0.0);
  CHECK(q == p);
  CHECK_THROWS(sgd_step(q, {}, 0.1));
  Matrix bad = mat({{std::nan("")}});
  CHECK_THROWS_AS(sgd_step(q, {{"p", bad}}, 0.1), NumericError);

  ParamSet r;
  r.add("p", Tensor(mat({{1}})));
  for (int s = 0; s < 2; ++s) {
    Tape t;
    ParamNodes n = t.bind(r);
    t.backward(scale(square(n.at("p")), 0.5));
    sgd_step(r, t.grads(n), 0.003);
  }
  CHECK(r.at("p").value()(0, 0) == doctest::Approx((1 - 0.003) * (1 - 0.003)).epsilon(1e-15));
}

TEST_CASE("dp_sgd_step laws") {
  ParamSet base;
  base.add("a", Tensor(mat({{1, 2}})));
  base.add("b", Tensor(mat({{0.5}})));
  std::vector<ParamGrads> samples = {{{"a", mat({{0.1, 0.2}})}, {"b", mat({{0.05}})}},
                                     {{"a", mat({{-0.3, 0.1}})}, {"b", mat({{0.2}})}}};
  {
    ParamSet dp = base, plain = base;
    Rng rng(1);
    dp_sgd_step(dp, samples, 1.0, 0.0, 0.1, rng);
    ParamGrads mean_g = {{"a", (samples[0].at("a") + samples[1].at("a")) / 2},
                         {"b", (samples[0].at("b") + samples[1].at("b")) / 2}};
    sgd_step(plain, mean_g, 0.1);
    CHECK((dp.at("a").value() - plain.at("a").value()).norm() < 1e-15);
    CHECK((dp.at("b").value() - plain.at("b").value()).norm() < 1e-15);
  }
  {
    // norm 2C, C = 1: contributes half of itself.
    std::vector<ParamGrads> one = {{{"a", mat({{1.2, 1.6}})}, {"b", mat({{0.0}})}}};
    Rng rng(1);
    ParamGrads g = privatize(one, 1.0, 0.0, rng);
    CHECK(g.at("a")(0, 0) == doctest::Approx(0.6));
    CHECK(g.at("a")(0, 1) == doctest::Approx(0.8));
  }
  {
    ParamSet a = base, b = base;
    Rng r1(42), r2(42);
    dp_sgd_step(a, samples, 0.1, 1.3, 0.1, r1);
    dp_sgd_step(b, samples, 0.1, 1.3, 0.1, r2);
    CHECK(a == b);
    CHECK(!(a == base));
  }
  {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      ParamGrads g = {{"a", gaussian(3, 4, rng, 5.0)}, {"b", gaussian(1, 2, rng, 5.0)}};
      clip_to_norm(g, 0.7);
      CHECK(global_norm(g) <= 0.7 + 1e-9);
    }
  }
  Rng rng(0);
  ParamSet p = base;
  CHECK_THROWS(dp_sgd_step(p, samples, 0.0, 1.0, 0.1, rng));
}

TEST_CASE("grad_check sanity") {
  Rng rng(2);
  ParamSet p;
  p.add("v", Tensor(gaussian(3, 2, rng)));
  ScalarFn half_sq = [](Tape&, const ParamNodes& n) { return scale(sum(square(n.at("v"))), 0.5); };
  CHECK(grad_check(half_sq, p) < 1e-8);

  ScalarFn chain = [](Tape&, const ParamNodes& n) { return sum(sigmoid(scale(sigmoid(n.at("v")), 3.0))); };
  CHECK(grad_check(chain, p, 1e-5) < 1e-4);

  auto value = [](const ParamSet& q) { return 0.5 * q.at("v").value().squaredNorm(); };
  ParamGrads wrong = {{"v", 2.0 * p.at("v").value()}};
  CHECK(grad_check(value, p, wrong) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(7);
  MlpSpec spec = critic_spec(3);
  ParamSet p = init_params(spec, rng);
  Matrix x = gaussian(4, 3, rng);
  auto run = [&] {
    Tape t;
    ParamNodes n = t.bind(p);
    Var y = mlp_forward(spec, n, t.input(x));
    t.backward(mean(y));
    return std::make_pair(y.value(), t.grads(n));
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  for (const auto& [k, g] : a.second) CHECK(g == b.second.at(k));
}

TEST_CASE("parameter snapshots round-trip bit-exactly") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    ParamSet p;
    const int n = 1 + trial % 4;
    for (int i = 0; i < n; ++i) {
      std::uniform_int_distribution<int> dim(1, 5);
      if (i % 2 == 0) {
        p.add("w" + std::to_string(i), Tensor(gaussian(dim(rng), dim(rng), rng, 1e3)));
      } else {
        p.add("b" + std::to_string(i), Tensor::vector(gaussian(1, dim(rng), rng)));
      }
    }
    const std::string bytes = params_to_bytes(p);
    ParamSet q = params_from_bytes(bytes);
    CHECK(q == p);
    CHECK(params_to_bytes(q) == bytes);
  }
  ParamSet p;
  p.add("z", Tensor(mat({{1.5}})));
  p.add("a", Tensor::vector(RowVector::Constant(2, -0.0)));
  const std::string bytes = params_to_bytes(p);
  // Count, then "a" first (sorted order).
  CHECK(static_cast<unsigned char>(bytes[0]) == 2);
  CHECK(bytes.substr(16, 1) == "a");
}
