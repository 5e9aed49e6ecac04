#include "shotnoise/fluid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shotnoise/errors.hpp"

namespace shotnoise {

double ell(double r) {
  if (!(r >= 0.0) || !std::isfinite(r))
    throw std::invalid_argument("ell: argument must be finite and nonnegative");
  if (r == 0.0) return 1.0;  // 0 log 0 = 0
  return r * std::log(r) - r + 1.0;
}

double cost_LT(const Control& control, const MarkSpace& marks, double horizon) {
  if (control.atoms() != marks.size())
    throw std::invalid_argument("cost_LT: control and mark space disagree on atom count");
  if (std::fabs(control.horizon() - horizon) > 1e-9 * std::max(1.0, horizon))
    throw std::invalid_argument("cost_LT: control horizon does not match T");
  double total = 0.0;
  for (std::size_t j = 0; j < control.cells(); ++j) {
    const double dt = control.cell_width(j);
    double cell = 0.0;
    for (std::size_t k = 0; k < marks.size(); ++k)
      cell += marks.weight(k) * ell(control.value(j, k));
    total += dt * cell;
  }
  return total;
}

Vec FluidSolution::at(double t) const {
  if (grid.empty()) throw std::logic_error("empty fluid solution");
  if (t <= grid.front()) return values.front();
  if (t >= grid.back()) return values.back();
  const auto it = std::upper_bound(grid.begin(), grid.end(), t);
  const std::size_t hi = static_cast<std::size_t>(it - grid.begin());
  const std::size_t lo = hi - 1;
  const double w = (t - grid[lo]) / (grid[hi] - grid[lo]);
  Vec out(values[lo].size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - w) * values[lo][i] + w * values[hi][i];
  return out;
}

namespace {

struct RefinedGrid {
  std::vector<double> nodes;          // nodes.size() = segments + 1
  std::vector<std::size_t> seg_cell;  // control cell per segment
};

RefinedGrid build_grid(const Control& control, int subnodes) {
  RefinedGrid g;
  g.nodes.push_back(0.0);
  for (std::size_t j = 0; j < control.cells(); ++j) {
    const double a = control.time_grid()[j];
    const double b = control.time_grid()[j + 1];
    for (int s = 1; s <= subnodes; ++s) {
      g.nodes.push_back(a + (b - a) * static_cast<double>(s) / subnodes);
      g.seg_cell.push_back(j);
    }
    g.nodes.back() = b;
  }
  return g;
}

// Drift weight per (segment, atom): g_jk * nu_k.
std::vector<std::vector<double>> segment_weights(const Control& control, const MarkSpace& marks,
                                                 const RefinedGrid& grid) {
  std::vector<std::vector<double>> w(grid.seg_cell.size());
  for (std::size_t s = 0; s < grid.seg_cell.size(); ++s) {
    w[s].resize(marks.size());
    for (std::size_t k = 0; k < marks.size(); ++k)
      w[s][k] = control.value(grid.seg_cell[s], k) * marks.weight(k);
  }
  return w;
}

double max_segment_kappa(const ShotNoiseModel& model, const RefinedGrid& grid,
                         const std::vector<std::vector<double>>& weights) {
  double worst = 0.0;
  for (std::size_t s = 0; s < grid.seg_cell.size(); ++s) {
    const double dt = grid.nodes[s + 1] - grid.nodes[s];
    double rate = 0.0;
    for (std::size_t k = 0; k < weights[s].size(); ++k)
      rate += model.lipschitz(k) * weights[s][k];
    worst = std::max(worst, dt * rate);
  }
  return worst;
}

struct PicardOutcome {
  std::vector<Vec> values;
  std::vector<int> iterations;  // per contraction subinterval
};

PicardOutcome picard_solve(const ShotNoiseModel& model, const RefinedGrid& grid,
                           const std::vector<std::vector<double>>& weights, double tol,
                           int max_iterations) {
  const std::size_t n_nodes = grid.nodes.size();
  const std::size_t n_atoms = model.marks.size();
  const std::size_t dim = static_cast<std::size_t>(model.d);

  // Contraction subintervals: consecutive segments with cumulative
  // int L_h g nu ds <= 1/2.
  std::vector<std::size_t> cuts{0};
  double acc = 0.0;
  for (std::size_t s = 0; s < grid.seg_cell.size(); ++s) {
    const double dt = grid.nodes[s + 1] - grid.nodes[s];
    double rate = 0.0;
    for (std::size_t k = 0; k < n_atoms; ++k) rate += model.lipschitz(k) * weights[s][k];
    const double kappa_seg = dt * rate;
    if (acc + kappa_seg > 0.5 && cuts.back() != s) {
      cuts.push_back(s);
      acc = 0.0;
    }
    acc += kappa_seg;
  }
  cuts.push_back(grid.seg_cell.size());

  const double tol_inner =
      std::max(tol / (2.0 * static_cast<double>(cuts.size())), 1e-16);

  PicardOutcome out;
  out.values.assign(n_nodes, Vec(dim, 0.0));
  std::vector<Vec> hv(n_nodes, Vec(dim, 0.0));  // h(z_k, xi(t_i)) folded with weights
  std::vector<Vec> next(n_nodes, Vec(dim, 0.0));

  auto drift_at = [&](std::size_t node, std::size_t seg, Vec& f) {
    f.assign(dim, 0.0);
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const Vec h = model.shot_value(k, out.values[node]);
      const double w = weights[seg][k];
      for (std::size_t i = 0; i < dim; ++i) f[i] += w * h[i];
    }
  };

  Vec fa(dim), fb(dim);
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    const std::size_t seg_lo = cuts[c];
    const std::size_t seg_hi = cuts[c + 1];
    double kappa_sub = 0.0;
    for (std::size_t s = seg_lo; s < seg_hi; ++s) {
      const double dt = grid.nodes[s + 1] - grid.nodes[s];
      double rate = 0.0;
      for (std::size_t k = 0; k < n_atoms; ++k) rate += model.lipschitz(k) * weights[s][k];
      kappa_sub += dt * rate;
    }

    int iter = 0;
    double diff = 0.0;
    for (;;) {
      ++iter;
      diff = 0.0;
      next[seg_lo] = out.values[seg_lo];
      for (std::size_t s = seg_lo; s < seg_hi; ++s) {
        const double dt = grid.nodes[s + 1] - grid.nodes[s];
        drift_at(s, s, fa);
        drift_at(s + 1, s, fb);
        Vec& cur = next[s + 1];
        cur = next[s];
        for (std::size_t i = 0; i < dim; ++i) cur[i] += 0.5 * dt * (fa[i] + fb[i]);
      }
      for (std::size_t s = seg_lo; s <= seg_hi; ++s) {
        for (std::size_t i = 0; i < dim; ++i)
          diff = std::max(diff, std::fabs(next[s][i] - out.values[s][i]));
        out.values[s] = next[s];
      }
      if (diff <= tol_inner) break;
      if (iter >= max_iterations)
        throw NonConvergenceError(
            "fluid solver: Picard iteration exceeded the iteration budget", kappa_sub, diff);
    }
    out.iterations.push_back(iter);
  }
  return out;
}

}  // namespace

FluidSolution solve_controlled_ode(const ShotNoiseModel& model, const Control& control,
                                   double tol, const std::vector<double>& extra_grid) {
  if (!(tol > 0.0)) throw std::invalid_argument("fluid solver: tol must be positive");
  if (control.atoms() != model.marks.size())
    throw std::invalid_argument("fluid solver: control and model disagree on atom count");
  if (std::fabs(control.horizon() - model.T) > 1e-9 * std::max(1.0, model.T))
    throw std::invalid_argument("fluid solver: control horizon does not match model T");

  constexpr int kBaseSubnodes = 32;
  constexpr int kMaxLevels = 12;
  constexpr int kMaxPicardIterations = 200;

  int subnodes = kBaseSubnodes;
  RefinedGrid prev_grid, cur_grid;
  PicardOutcome prev, cur;
  bool have_prev = false;
  double achieved = 0.0;
  int levels = 0;

  for (int level = 0; level < kMaxLevels; ++level) {
    cur_grid = build_grid(control, subnodes);
    const auto weights = segment_weights(control, model.marks, cur_grid);
    if (max_segment_kappa(model, cur_grid, weights) > 0.45 && level + 1 < kMaxLevels) {
      subnodes *= 2;  // a single segment must already contract before iterating
      continue;
    }
    cur = picard_solve(model, cur_grid, weights, tol, kMaxPicardIterations);
    ++levels;
    if (have_prev) {
      // prev nodes are every second node of the current grid
      double diff = 0.0;
      for (std::size_t i = 0; i < prev_grid.nodes.size(); ++i)
        for (std::size_t c = 0; c < cur.values[2 * i].size(); ++c)
          diff = std::max(diff, std::fabs(cur.values[2 * i][c] - prev.values[i][c]));
      achieved = diff;
      if (diff <= 3.0 * tol) break;
    }
    prev_grid = cur_grid;
    prev = cur;
    have_prev = true;
    subnodes *= 2;
  }

  FluidSolution sol;
  sol.achieved_tolerance = achieved;
  sol.refinement_levels = levels;
  sol.picard_iterations = cur.iterations;
  if (extra_grid.empty()) {
    sol.grid = cur_grid.nodes;
    sol.values = cur.values;
    return sol;
  }

  FluidSolution base;
  base.grid = cur_grid.nodes;
  base.values = cur.values;
  std::vector<double> merged = cur_grid.nodes;
  for (double t : extra_grid) {
    if (t < 0.0 || t > model.T + 1e-12)
      throw std::invalid_argument("fluid solver: requested grid point outside [0, T]");
    merged.push_back(std::min(t, model.T));
  }
  std::sort(merged.begin(), merged.end());
  merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
  sol.grid = merged;
  sol.values.reserve(merged.size());
  for (double t : merged) sol.values.push_back(base.at(t));
  sol.achieved_tolerance = achieved;
  sol.refinement_levels = levels;
  sol.picard_iterations = cur.iterations;
  return sol;
}

double fluid_residual(const ShotNoiseModel& model, const Control& control,
                      const FluidSolution& solution) {
  const std::size_t dim = static_cast<std::size_t>(model.d);
  const std::size_t n_atoms = model.marks.size();

  auto drift = [&](double t, const Vec& x, Vec& f) {
    f.assign(dim, 0.0);
    const std::size_t cell = control.cell_of(t);
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const Vec h = model.shot_value(k, x);
      const double w = control.value(cell, k) * model.marks.weight(k);
      for (std::size_t i = 0; i < dim; ++i) f[i] += w * h[i];
    }
  };

  double worst = 0.0;
  Vec integral(dim, 0.0), fa(dim), fm(dim), fb(dim), mid(dim);
  for (std::size_t s = 0; s + 1 < solution.grid.size(); ++s) {
    const double a = solution.grid[s];
    const double b = solution.grid[s + 1];
    const double tm = 0.5 * (a + b);
    for (std::size_t i = 0; i < dim; ++i)
      mid[i] = 0.5 * (solution.values[s][i] + solution.values[s + 1][i]);
    drift(0.5 * (a + tm), solution.values[s], fa);
    drift(tm, mid, fm);
    drift(0.5 * (tm + b), solution.values[s + 1], fb);
    for (std::size_t i = 0; i < dim; ++i)
      integral[i] += 0.25 * (b - a) * (fa[i] + 2.0 * fm[i] + fb[i]);
    double dev = 0.0;
    for (std::size_t i = 0; i < dim; ++i)
      dev += (solution.values[s + 1][i] - integral[i]) * (solution.values[s + 1][i] - integral[i]);
    worst = std::max(worst, std::sqrt(dev));
  }
  return worst;
}

}  // namespace shotnoise
