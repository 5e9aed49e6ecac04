#pragma once

#include <vector>

#include "shotnoise/control.hpp"
#include "shotnoise/model.hpp"

namespace shotnoise {

/// Entropy integrand r log r - r + 1 with the 0 log 0 = 0 convention.
/// Nonnegative, convex, zero only at r = 1.
double ell(double r);

/// Entropy cost of a tilt: sum_j dt_j sum_k nu_k ell(g_jk). Exact finite sum.
double cost_LT(const Control& control, const MarkSpace& marks, double horizon);

struct FluidSolution {
  std::vector<double> grid;
  std::vector<Vec> values;
  std::vector<int> picard_iterations;  // per contraction subinterval, finest level
  double achieved_tolerance = 0.0;     // last inter-level sup difference
  int refinement_levels = 1;

  /// Piecewise-linear interpolant of the grid values.
  Vec at(double t) const;
};

/// Solves xi(t) = int_0^t sum_k h(z_k, xi(s)) g(s,k) nu_k ds by Picard
/// iteration on subintervals where the contraction estimate
/// int L_h g nu ds <= 1/2, with trapezoidal quadrature on a refinement of
/// the control grid. The refinement is doubled until consecutive solutions
/// agree within 3*tol in the sup norm, so the returned grid values carry a
/// discretization error of about tol.
FluidSolution solve_controlled_ode(const ShotNoiseModel& model, const Control& control,
                                   double tol = 1e-9,
                                   const std::vector<double>& extra_grid = {});

/// Sup over the solution grid of the equation residual, re-integrated at
/// double the stored resolution (midpoints by linear interpolation).
double fluid_residual(const ShotNoiseModel& model, const Control& control,
                      const FluidSolution& solution);

}  // namespace shotnoise
