#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stemfold/autodiff.hpp"

namespace stemfold {

// Autonomous dynamics dz/dt = f(z). Must be pure and shape-preserving.
using OdeFunction = std::function<ad::Var(const ad::Var& z)>;

// Classical fourth-order Runge-Kutta with `substeps` equal internal steps per
// grid interval. Returns z at every grid time (first entry is z0 itself).
// The computation is recorded on z0's tape, so gradients w.r.t. z0 and any
// parameters captured by f come from differentiating the unrolled steps.
//
// Throws InvalidArgument for an empty or non-increasing grid and
// NumericalOverflow (with the internal step index) if a state goes non-finite.
std::vector<ad::Var> rk4_integrate(const OdeFunction& f, const ad::Var& z0,
                                   std::span<const double> t_grid, int substeps = 1);

// Loss builder for gradient checking: receives parameter Vars on a fresh tape.
using LossFunction = std::function<ad::Var(ad::Tape&, std::span<const ad::Var> params)>;

// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
double check_gradient(const LossFunction& loss, const std::vector<Tensor>& params,
                      double eps = 1e-5);

}  // namespace stemfold
