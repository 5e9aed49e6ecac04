#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "shotnoise/fluid.hpp"
#include "shotnoise/model.hpp"

namespace shotnoise {

/// Constraint on the fluid path: either a terminal point or a list of
/// (time, state) pairs at control-grid nodes.
struct RateConstraint {
  static RateConstraint terminal_point(Vec target);
  static RateConstraint path_points(std::vector<double> times, std::vector<Vec> states);

  bool is_terminal() const { return times.empty(); }

  Vec terminal;
  std::vector<double> times;
  std::vector<Vec> states;
};

struct RateOptions {
  int cells = 16;           // J time cells, uniform on [0, T]
  int quad_subnodes = 64;   // Heun substeps per cell
  double constraint_tol = 1e-6;
  double grad_tol = 1e-9;
  int max_outer = 50;
  int max_inner = 400;
  double initial_penalty = 10.0;
};

struct RateTraceRow {
  int outer = 0;
  int inner_iterations = 0;
  double penalty = 0.0;
  double residual = 0.0;
  double cost = 0.0;
  double grad_norm = 0.0;
};

struct RateResult {
  Control control;           // g*
  double cost = 0.0;         // L_T(g*)
  FluidSolution fluid_path;  // xi^{g*} recomputed with the Picard solver
  double residual = 0.0;     // constraint violation measured on fluid_path
  std::vector<RateTraceRow> trace;
  int inner_iterations_total = 0;
  double final_grad_norm = 0.0;
  bool converged = false;

  nlohmann::json to_json() const;
};

/// Independent rate oracle for state-independent shot values:
/// T * Lambda*(a/T) with Lambda(theta) = sum_k (e^{theta.h(z_k)} - 1) nu_k.
/// Damped Newton on the strictly concave dual. Throws InfeasibleError when
/// the target leaves the closure of the reachable cone.
double legendre_oracle(const ShotNoiseModel& model, const Vec& target, double horizon);

/// Value and gradient of the penalized objective
///   L_T(e^u) + lambda . r(u) + (penalty/2) ||r(u)||^2
/// where r stacks the constraint residuals of the Heun-discretized flow and
/// u = log g laid out cell-major. The gradient is the exact adjoint of the
/// discrete scheme. Exposed for gradient verification.
double penalized_objective(const ShotNoiseModel& model, const RateConstraint& constraint,
                           const RateOptions& opts, const std::vector<double>& u,
                           const std::vector<double>& multipliers, double penalty,
                           std::vector<double>* grad);

/// Minimizes L_T(g) over piecewise-constant controls subject to the fluid
/// constraint, by an augmented-Lagrangian outer loop around L-BFGS in
/// u = log g. The reported cost is an upper bound on the true infimum; a
/// failure to converge signals infeasible-or-stiff, never a certificate
/// that the rate is infinite.
RateResult minimize_rate(const ShotNoiseModel& model, const RateConstraint& constraint,
                         const RateOptions& opts = {});

/// The optimal tilt as a Control for simulate_prm / likelihood_weight.
/// Throws std::logic_error on a non-converged result.
Control export_tilt(const RateResult& result);

}  // namespace shotnoise
