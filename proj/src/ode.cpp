#include "stemfold/ode.hpp"

#include <algorithm>
#include <cmath>

#include "stemfold/errors.hpp"

namespace stemfold {

std::vector<ad::Var> rk4_integrate(const OdeFunction& f, const ad::Var& z0,
                                   std::span<const double> t_grid, int substeps) {
  if (t_grid.empty()) throw InvalidArgument("rk4_integrate: empty time grid");
  if (substeps < 1) throw InvalidArgument("rk4_integrate: substeps must be >= 1");
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    if (!(t_grid[i] > t_grid[i - 1])) {
      throw InvalidArgument("rk4_integrate: time grid must be strictly increasing");
    }
  }
  if (!z0.value().all_finite()) throw NumericalOverflow("rk4_integrate: non-finite z0", 0);

  std::vector<ad::Var> out;
  out.reserve(t_grid.size());
  out.push_back(z0);
  ad::Var z = z0;
  long step = 0;
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    const double h = (t_grid[i] - t_grid[i - 1]) / substeps;
    for (int s = 0; s < substeps; ++s) {
      ++step;
      const ad::Var k1 = f(z);
      const ad::Var k2 = f(ad::add(z, ad::scale(k1, 0.5 * h)));
      const ad::Var k3 = f(ad::add(z, ad::scale(k2, 0.5 * h)));
      const ad::Var k4 = f(ad::add(z, ad::scale(k3, h)));
      const ad::Var inc = ad::add(ad::add(k1, k4), ad::scale(ad::add(k2, k3), 2.0));
      z = ad::add(z, ad::scale(inc, h / 6.0));
      if (!z.value().all_finite()) {
        throw NumericalOverflow("rk4_integrate: non-finite state", step);
      }
    }
    out.push_back(z);
  }
  return out;
}

double check_gradient(const LossFunction& loss, const std::vector<Tensor>& params, double eps) {
  auto evaluate = [&](const std::vector<Tensor>& values, std::vector<Tensor>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(values.size());
    for (const Tensor& v : values) vars.push_back(tape.parameter(v));
    const ad::Var l = loss(tape, vars);
    if (l.value().size() != 1) {
      throw InvalidArgument("check_gradient: loss must be scalar, got " +
                            l.value().shape_string());
    }
    if (grads != nullptr) {
      tape.backward(l);
      grads->clear();
      for (const ad::Var& v : vars) grads->push_back(tape.grad(v));
    }
    return l.value()[0];
  };

  std::vector<Tensor> analytic;
  evaluate(params, &analytic);

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      probe[p][i] = orig + eps;
      const double up = evaluate(probe, nullptr);
      probe[p][i] = orig - eps;
      const double down = evaluate(probe, nullptr);
      probe[p][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace stemfold
