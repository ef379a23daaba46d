#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "icafs/gates/gates.hpp"
#include "icafs/nn/grad_check.hpp"

using namespace icafs;
using namespace icafs::gates;
using nn::Matrix;
using nn::RowVector;

namespace {

RowVector row(std::initializer_list<double> v) {
  RowVector r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

}  // namespace

TEST_CASE("temperature schedule") {
  CHECK(temperature(0, 200, 100) == 1.0);
  CHECK(temperature(200, 200, 100) == 100.0);
  CHECK(temperature(100, 200, 100) == doctest::Approx(10.0).epsilon(1e-14));
  CHECK_THROWS_AS(temperature(1, 10, 0.5), ConfigError);
  CHECK_THROWS_AS(temperature(11, 10, 2), ConfigError);
  double prev = 0;
  for (int t = 0; t <= 50; ++t) {
    const double tau = temperature(t, 50, 37);
    CHECK(tau >= prev);
    CHECK(tau >= 1.0);
    CHECK(tau <= 37.0);
    prev = tau;
  }
  TemperatureSchedule fixed{100, 10, true};
  for (int t = 0; t <= 10; ++t) CHECK(fixed.at(t) == 1.0);
}

TEST_CASE("soft gate cases") {
  Matrix z(1, 3);
  z << 0.0, 1.0, -1.0;
  RowVector w = row({1.0, 1e4, 1e4});
  RowVector w0 = RowVector::Zero(3);
  Matrix raw = raw_soft_gate(z, w, w0, 1.0);
  CHECK(raw(0, 0) == 1.0);
  CHECK(raw(0, 1) == doctest::Approx(2.0));
  Matrix a = soft_gate(z, w, w0, 1.0);
  CHECK(a(0, 0) == 1.0);
  CHECK(a(0, 1) == 1.0);
  CHECK(a(0, 2) < 1e-12);
  CHECK(soft_gate(z, row({0.5, -0.5, 0.5}), w0, 1e6)(0, 2) < 1e-12);
}

TEST_CASE("soft gate stays in [0, 1] and sharpens with temperature") {
  nn::Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix z = nn::gaussian(4, 6, rng, 2.0);
    RowVector w = nn::gaussian(1, 6, rng, 1.0);
    RowVector w0 = nn::gaussian(1, 6, rng, 1.0);
    Matrix prev_dist;
    for (double tau : {1.0, 2.0, 5.0, 20.0, 100.0}) {
      Matrix a = soft_gate(z, w, w0, tau);
      CHECK(a.minCoeff() >= 0.0);
      CHECK(a.maxCoeff() <= 1.0);
      Matrix raw = raw_soft_gate(z, w, w0, tau);
      Matrix dist(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
          const double limit = w(j) * z(i, j) > 0 ? 1.0 / logistic(w0(j)) : 0.0;
          dist(i, j) = std::abs(raw(i, j) - limit);
        }
      if (prev_dist.size()) CHECK(((dist.array() - prev_dist.array()) <= 1e-15).all());
      prev_dist = dist;
    }
  }
}

TEST_CASE("hard gate cases and limit consistency") {
  Matrix z(1, 3);
  z << -0.3, 0.0, 2.0;
  Matrix m = hard_gate(z, row({1.0, 5.0, 1.0}));
  CHECK(m(0, 0) == 0.0);
  CHECK(m(0, 1) == 0.0);
  CHECK(m(0, 2) == 1.0);

  nn::Rng rng(11);
  std::normal_distribution<double> g(0, 1);
  int agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Matrix zz(1, 1);
    zz(0, 0) = g(rng);
    RowVector w = row({g(rng)});
    RowVector w0 = RowVector::Zero(1);
    const double hard = hard_gate(zz, w)(0, 0);
    // Unclamped ratio tends to 2 or 0; threshold halfway through sigma(0) / sigma(w0) = 1.
    const double limit = raw_soft_gate(zz, w, w0, 1e12)(0, 0);
    agree += (limit > 1.0) == (hard == 1.0);
    if (std::abs(w(0) * zz(0, 0)) > 1e-4) CHECK(std::abs(soft_gate(zz, w, w0, 1e6)(0, 0) - hard) < 1e-6);
  }
  CHECK(agree == 1000);
}

TEST_CASE("select cases") {
  Matrix z(1, 2);
  z << 1, 3;
  CHECK(select(z, Matrix::Ones(1, 2)) == z);
  CHECK(select(z, Matrix::Zero(1, 2)) == Matrix::Constant(1, 2, 2.0));
  Matrix a(1, 2);
  a << 0.5, 1.0;
  Matrix s = select(z, a);
  CHECK(s(0, 0) == 1.5);
  CHECK(s(0, 1) == 3.0);

  nn::Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix z1 = nn::gaussian(3, 5, rng), z2 = nn::gaussian(3, 5, rng);
    Matrix al = nn::uniform(3, 5, rng, 0, 1);
    CHECK(select(z1, Matrix::Ones(3, 5)) == z1);
    Matrix lhs = select((2.0 * z1 - 0.5 * z2).eval(), al);
    Matrix rhs = 2.0 * select(z1, al) - 0.5 * select(z2, al);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("gate penalty cases") {
  Matrix am(2, 2);
  am << 0.5, 0.9, 0.7, 0.7;  // batch mean (0.6, 0.8)
  CHECK(gate_penalty({am}, 1.2) == doctest::Approx(1.2).epsilon(1e-15));
  CHECK(gate_penalty({Matrix::Zero(3, 4)}, 1.2) == 0.0);
  CHECK(gate_penalty({am}, 0.0) == 0.0);
  CHECK_THROWS_AS(gate_penalty({am}, -1.0), ConfigError);

  nn::Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix a = nn::uniform(1, 4, rng, 0, 1);
    Matrix b = a;
    std::uniform_int_distribution<int> pick(0, 3);
    b(0, pick(rng)) += 0.1;
    CHECK(gate_penalty({b}, 1.2) >= gate_penalty({a}, 1.2));
  }
}

TEST_CASE("recorded gate ops match value-level algebra") {
  nn::Rng rng(2);
  Matrix z = nn::gaussian(5, 4, rng);
  GateParams g = GateParams::init(4, rng);
  nn::Tape t;
  nn::Var zv = t.input(z), wv = t.input(g.w);
  nn::Var a = soft_gate(zv, wv, g.w0(), 3.0);
  CHECK(a.value() == soft_gate(z, g, 3.0));
  nn::Var s = select(zv, a);
  CHECK((s.value() - select(z, soft_gate(z, g, 3.0))).cwiseAbs().maxCoeff() < 1e-14);
  nn::Var pen = gate_penalty({a, a}, 0.7);
  CHECK(pen.scalar() == doctest::Approx(gate_penalty({a.value(), a.value()}, 0.7)).epsilon(1e-14));
}

TEST_CASE("gate path gradients match finite differences") {
  nn::Rng rng(6);
  for (auto rule : {ClampGradient::straight_through, ClampGradient::zero}) {
    nn::ParamSet p;
    p.add("z", nn::Tensor(nn::gaussian(6, 5, rng, 0.5)));
    p.add("w", nn::Tensor::vector(nn::gaussian(1, 5, rng, 0.5)));
    const RowVector w0 = RowVector::Constant(5, 3.0);  // keeps the ratio below the clamp
    const Matrix c = nn::gaussian(6, 5, rng);
    nn::ScalarFn f = [&](nn::Tape& t, const nn::ParamNodes& n) {
      nn::Var a = soft_gate(n.at("z"), n.at("w"), w0, 2.0, rule);
      nn::Var s = select(n.at("z"), a);
      return nn::add(nn::sum(nn::mul(s, t.constant(c))), gate_penalty({a}, 1.2));
    };
    CHECK(nn::grad_check(f, p, 1e-5) < 1e-4);
  }
}

TEST_CASE("clamp gradient rules differ only in the clamped region") {
  Matrix z(1, 2);
  z << 3.0, 0.1;
  RowVector w0 = RowVector::Zero(2);
  for (auto rule : {ClampGradient::straight_through, ClampGradient::zero}) {
    nn::Tape t;
    nn::Var zv = t.constant(z);
    nn::Var wv = t.input(Matrix::Constant(1, 2, -0.5));
    nn::Var w2 = t.input(Matrix::Constant(1, 2, 1.0));
    nn::Var lo = soft_gate(zv, wv, w0, 1.0, rule);  // unclamped
    nn::Var hi = soft_gate(zv, w2, w0, 1.0, rule);  // clamped at 1
    t.backward({{lo, Matrix::Ones(1, 2)}, {hi, Matrix::Ones(1, 2)}});
    CHECK(t.grad(wv).cwiseAbs().minCoeff() > 0.0);
    if (rule == ClampGradient::zero) {
      CHECK(t.grad(w2).cwiseAbs().maxCoeff() == 0.0);
    } else {
      CHECK(t.grad(w2).cwiseAbs().minCoeff() > 0.0);
    }
  }
  CHECK(clamp_gradient_from_string("zero") == ClampGradient::zero);
  CHECK_THROWS_AS(clamp_gradient_from_string("none"), ConfigError);
}

TEST_CASE("selected_set and report") {
  Matrix z(3, 3);
  z << 1, 2, -1, 3, -4, -2, 2, 1, -3;
  GateParams g(row({1.0, 0.0, -1.0}), RowVector::Zero(3), 0);
  GateParams h(row({0.0, 1.0, 0.0}), RowVector::Zero(3), 1);
  Selection s = selected_set({g, h}, z);
  CHECK(s.chosen[0] == std::vector<int>{0, 2});
  CHECK(s.chosen[1] == std::vector<int>{1});
  CHECK(s.ensemble == std::vector<int>{0, 1, 2});
  CHECK(s.frequency[1](1) == doctest::Approx(2.0 / 3.0));
  CHECK(s.frequency[0](1) == 0.0);
  CHECK_THROWS_AS(selected_set({g}, Matrix(0, 3)), DataError);

  auto path = std::filesystem::temp_directory_path() / "icafs_test_gates" / "sel.csv";
  write_selection_csv(s, {{0, 0, 2}, {1, 2, 1}}, path);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "selector,embedding_index,client,client_index,frequency");
  CHECK(first == "0,0,0,0,1");

  FeatureMask m = make_mask(row({1, 0, 1}), {{0, 0, 2}, {1, 2, 1}});
  CHECK(m.slice(1) == row({1}));
  CHECK_THROWS_AS(make_mask(row({1, 0.5, 1}), {{0, 0, 3}}), ShapeError);
}
