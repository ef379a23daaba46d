#include "icafs/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace icafs::nn {

ParamGrads finite_difference(const std::function<double(const ParamSet&)>& f, const ParamSet& params, double h) {
  ParamGrads out = zeros_like(params);
  ParamSet probe = params;
  for (auto& [name, t] : probe) {
    Matrix& v = t.value();
    Matrix& g = out.at(name);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + h;
      const double up = f(probe);
      v.data()[i] = orig - h;
      const double down = f(probe);
      v.data()[i] = orig;
      g.data()[i] = (up - down) / (2.0 * h);
    }
  }
  return out;
}

double grad_check(const std::function<double(const ParamSet&)>& f, const ParamSet& params,
                  const ParamGrads& analytic, double h) {
  const ParamGrads numeric = finite_difference(f, params, h);
  double worst = 0.0;
  for (const auto& [name, n] : numeric) {
    const Matrix& a = analytic.at(name);
    for (Eigen::Index i = 0; i < n.size(); ++i) {
      const double an = a.data()[i], cd = n.data()[i];
      worst = std::max(worst, std::abs(an - cd) / (std::abs(an) + std::abs(cd) + 1e-12));
    }
  }
  return worst;
}

double grad_check(const ScalarFn& f, const ParamSet& params, double h) {
  Tape tape;
  ParamNodes nodes = tape.bind(params);
  tape.backward(f(tape, nodes));
  const ParamGrads analytic = tape.grads(nodes);
  auto value = [&f](const ParamSet& p) {
    Tape t;
    ParamNodes n;
    for (const auto& [name, tensor] : p) n.emplace(name, t.constant(tensor.value()));
    return f(t, n).scalar();
  };
  return grad_check(value, params, analytic, h);
}

}  // namespace icafs::nn
