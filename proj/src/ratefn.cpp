#include "shotnoise/ratefn.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "shotnoise/errors.hpp"

namespace shotnoise {

namespace {

// Dense solve with partial pivoting; n is tiny (d or the NNLS passive set).
bool solve_linear(std::vector<double> a, Vec b, std::size_t n, Vec& x) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
    if (std::fabs(a[piv * n + col]) < 1e-300) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  x.assign(n, 0.0);
  for (std::size_t ri = n; ri-- > 0;) {
    double s = b[ri];
    for (std::size_t c = ri + 1; c < n; ++c) s -= a[ri * n + c] * x[c];
    x[ri] = s / a[ri * n + ri];
  }
  return true;
}

// Lawson-Hanson NNLS: distance from b to the cone {sum c_k cols_k : c >= 0}.
double nnls_distance(const std::vector<Vec>& cols, const Vec& b) {
  const std::size_t d = b.size();
  const std::size_t K = cols.size();
  std::vector<bool> passive(K, false);
  Vec c(K, 0.0);
  Vec resid = b;

  double col_scale = 0.0;
  for (const Vec& col : cols) col_scale = std::max(col_scale, norm2(col));
  const double tol = 1e-12 * (1.0 + norm2(b)) * (1.0 + col_scale);

  for (int guard = 0; guard < static_cast<int>(3 * K + 10); ++guard) {
    std::size_t best = K;
    double best_w = tol;
    for (std::size_t k = 0; k < K; ++k) {
      if (passive[k]) continue;
      const double w = dot(cols[k], resid);
      if (w > best_w) {
        best_w = w;
        best = k;
      }
    }
    if (best == K) break;
    passive[best] = true;

    for (int inner = 0; inner < static_cast<int>(3 * K + 10); ++inner) {
      std::vector<std::size_t> idx;
      for (std::size_t k = 0; k < K; ++k)
        if (passive[k]) idx.push_back(k);
      const std::size_t m = idx.size();
      std::vector<double> gram(m * m, 0.0);
      Vec rhs(m, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        rhs[i] = dot(cols[idx[i]], b);
        for (std::size_t j = 0; j < m; ++j) gram[i * m + j] = dot(cols[idx[i]], cols[idx[j]]);
        gram[i * m + i] += 1e-14 * (1.0 + col_scale * col_scale);
      }
      Vec z;
      if (!solve_linear(gram, rhs, m, z)) {
        passive[best] = false;
        break;
      }
      bool all_positive = true;
      for (double v : z)
        if (v <= 0.0) all_positive = false;
      if (all_positive) {
        for (std::size_t i = 0; i < m; ++i) c[idx[i]] = z[i];
        break;
      }
      double alpha = 1.0;
      for (std::size_t i = 0; i < m; ++i)
        if (z[i] <= 0.0) alpha = std::min(alpha, c[idx[i]] / (c[idx[i]] - z[i]));
      for (std::size_t i = 0; i < m; ++i) {
        c[idx[i]] += alpha * (z[i] - c[idx[i]]);
        if (c[idx[i]] <= 1e-15) {
          c[idx[i]] = 0.0;
          passive[idx[i]] = false;
        }
      }
    }

    resid = b;
    for (std::size_t k = 0; k < K; ++k)
      if (c[k] > 0.0)
        for (std::size_t i = 0; i < d; ++i) resid[i] -= c[k] * cols[k][i];
  }
  return norm2(resid);
}

struct FlowLayout {
  int cells = 0;
  int subnodes = 0;
  double dt = 0.0;
  double eta = 0.0;
  std::vector<std::size_t> constraint_nodes;  // Heun node index per constraint point
  std::vector<Vec> targets;
};

FlowLayout make_layout(const ShotNoiseModel& model, const RateConstraint& constraint,
                       const RateOptions& opts) {
  if (opts.cells < 1) throw std::invalid_argument("minimize_rate: cells must be >= 1");
  if (opts.quad_subnodes < 1)
    throw std::invalid_argument("minimize_rate: quad_subnodes must be >= 1");
  FlowLayout lay;
  lay.cells = opts.cells;
  lay.subnodes = opts.quad_subnodes;
  lay.dt = model.T / opts.cells;
  lay.eta = lay.dt / opts.quad_subnodes;
  const std::size_t dim = static_cast<std::size_t>(model.d);

  auto check_target = [&](const Vec& a) {
    if (a.size() != dim) throw std::invalid_argument("rate constraint: target dimension mismatch");
    for (double v : a)
      if (!std::isfinite(v) || v < 0.0)
        throw std::invalid_argument("rate constraint: targets must be finite and nonnegative");
  };

  if (constraint.is_terminal()) {
    check_target(constraint.terminal);
    lay.constraint_nodes.push_back(
        static_cast<std::size_t>(opts.cells) * static_cast<std::size_t>(opts.quad_subnodes));
    lay.targets.push_back(constraint.terminal);
  } else {
    if (constraint.times.size() != constraint.states.size() || constraint.times.empty())
      throw std::invalid_argument("rate constraint: times and states must pair up");
    for (std::size_t p = 0; p < constraint.times.size(); ++p) {
      const double t = constraint.times[p];
      const double cell_pos = t / lay.dt;
      const double rounded = std::round(cell_pos);
      if (std::fabs(t - rounded * lay.dt) > 1e-9 * std::max(1.0, model.T) || rounded < 0.0 ||
          rounded > static_cast<double>(opts.cells))
        throw std::invalid_argument(
            "rate constraint: path times must sit on the control grid in [0, T]");
      check_target(constraint.states[p]);
      lay.constraint_nodes.push_back(static_cast<std::size_t>(rounded) *
                                     static_cast<std::size_t>(opts.quad_subnodes));
      lay.targets.push_back(constraint.states[p]);
    }
  }
  return lay;
}

// Jacobian of h in x; falls back to finite differences when the model does
// not carry an analytic one.
void shot_jacobian(const ShotNoiseModel& model, std::size_t atom, const Vec& x, Mat& jac) {
  const std::size_t dim = x.size();
  if (model.shot_value_jac) {
    model.shot_value_jac(atom, x, jac);
    return;
  }
  jac.assign(dim * dim, 0.0);
  const double step = 1e-6 * (1.0 + norm2(x));
  Vec xp = x, xm = x;
  for (std::size_t l = 0; l < dim; ++l) {
    const double lo = x[l] >= step ? x[l] - step : 0.0;
    xp[l] = x[l] + step;
    xm[l] = lo;
    const Vec hp = model.shot_value(atom, xp);
    const Vec hm = model.shot_value(atom, xm);
    const double width = xp[l] - xm[l];
    for (std::size_t i = 0; i < dim; ++i) jac[i * dim + l] = (hp[i] - hm[i]) / width;
    xp[l] = x[l];
    xm[l] = x[l];
  }
}

struct ForwardRecord {
  std::vector<Vec> x;   // states at Heun nodes, size N+1
  std::vector<Vec> xm;  // midpoints, size N
  Vec residuals;        // stacked constraint residuals
};

void run_forward(const ShotNoiseModel& model, const FlowLayout& lay, const Vec& g,
                 ForwardRecord& rec) {
  const std::size_t dim = static_cast<std::size_t>(model.d);
  const std::size_t n_atoms = model.marks.size();
  const std::size_t n_steps =
      static_cast<std::size_t>(lay.cells) * static_cast<std::size_t>(lay.subnodes);

  rec.x.assign(n_steps + 1, Vec(dim, 0.0));
  rec.xm.assign(n_steps, Vec(dim, 0.0));

  Vec k1(dim), k2(dim);
  auto drift = [&](const Vec& x, std::size_t cell, Vec& f) {
    f.assign(dim, 0.0);
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double w = g[cell * n_atoms + k] * model.marks.weight(k);
      if (w == 0.0) continue;
      const Vec h = model.shot_value(k, x);
      for (std::size_t i = 0; i < dim; ++i) f[i] += w * h[i];
    }
  };

  for (std::size_t step = 0; step < n_steps; ++step) {
    const std::size_t cell = step / static_cast<std::size_t>(lay.subnodes);
    drift(rec.x[step], cell, k1);
    Vec& mid = rec.xm[step];
    mid = rec.x[step];
    for (std::size_t i = 0; i < dim; ++i) mid[i] += lay.eta * k1[i];
    drift(mid, cell, k2);
    Vec& next = rec.x[step + 1];
    next = rec.x[step];
    for (std::size_t i = 0; i < dim; ++i) next[i] += 0.5 * lay.eta * (k1[i] + k2[i]);
  }

  rec.residuals.assign(lay.targets.size() * dim, 0.0);
  for (std::size_t p = 0; p < lay.targets.size(); ++p)
    for (std::size_t i = 0; i < dim; ++i)
      rec.residuals[p * dim + i] = rec.x[lay.constraint_nodes[p]][i] - lay.targets[p][i];
}

}  // namespace

RateConstraint RateConstraint::terminal_point(Vec target) {
  RateConstraint c;
  c.terminal = std::move(target);
  return c;
}

RateConstraint RateConstraint::path_points(std::vector<double> times, std::vector<Vec> states) {
  RateConstraint c;
  c.times = std::move(times);
  c.states = std::move(states);
  return c;
}

double penalized_objective(const ShotNoiseModel& model, const RateConstraint& constraint,
                           const RateOptions& opts, const std::vector<double>& u,
                           const std::vector<double>& multipliers, double penalty,
                           std::vector<double>* grad) {
  const FlowLayout lay = make_layout(model, constraint, opts);
  const std::size_t n_atoms = model.marks.size();
  const std::size_t dim = static_cast<std::size_t>(model.d);
  const std::size_t n_u = static_cast<std::size_t>(lay.cells) * n_atoms;
  if (u.size() != n_u) throw std::invalid_argument("penalized_objective: u has the wrong size");
  if (multipliers.size() != lay.targets.size() * dim)
    throw std::invalid_argument("penalized_objective: multiplier vector has the wrong size");

  Vec g(n_u);
  for (std::size_t i = 0; i < n_u; ++i) g[i] = std::exp(u[i]);

  ForwardRecord rec;
  run_forward(model, lay, g, rec);

  // Entropy cost sum_j dt sum_k nu_k (g log g - g + 1) plus the augmented
  // Lagrangian terms.
  double value = 0.0;
  for (std::size_t j = 0; j < static_cast<std::size_t>(lay.cells); ++j)
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double gv = g[j * n_atoms + k];
      value += lay.dt * model.marks.weight(k) * (gv * u[j * n_atoms + k] - gv + 1.0);
    }
  for (std::size_t i = 0; i < rec.residuals.size(); ++i)
    value += multipliers[i] * rec.residuals[i] + 0.5 * penalty * rec.residuals[i] * rec.residuals[i];

  if (grad == nullptr) return value;

  grad->assign(n_u, 0.0);
  for (std::size_t j = 0; j < static_cast<std::size_t>(lay.cells); ++j)
    for (std::size_t k = 0; k < n_atoms; ++k)
      (*grad)[j * n_atoms + k] =
          lay.dt * model.marks.weight(k) * u[j * n_atoms + k] * g[j * n_atoms + k];

  // Reverse sweep of the Heun recursion. gbar accumulates d(value)/d(g_jk).
  const std::size_t n_steps =
      static_cast<std::size_t>(lay.cells) * static_cast<std::size_t>(lay.subnodes);
  Vec gbar(n_u, 0.0);
  Vec xbar(dim, 0.0);

  // Constraint seeds enter the adjoint where their node is reached.
  std::vector<Vec> seeds(n_steps + 1);
  for (std::size_t p = 0; p < lay.targets.size(); ++p) {
    Vec& s = seeds[lay.constraint_nodes[p]];
    if (s.empty()) s.assign(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      s[i] += multipliers[p * dim + i] + penalty * rec.residuals[p * dim + i];
  }
  if (!seeds[n_steps].empty()) xbar = seeds[n_steps];

  Mat jac;
  Vec k1bar(dim), k2bar(dim), xmbar(dim), tmp(dim);
  auto jac_t_apply = [&](const Vec& x, std::size_t cell, const Vec& y, Vec& out) {
    out.assign(dim, 0.0);
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double w = g[cell * n_atoms + k] * model.marks.weight(k);
      if (w == 0.0) continue;
      shot_jacobian(model, k, x, jac);
      for (std::size_t l = 0; l < dim; ++l) {
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) s += jac[i * dim + l] * y[i];
        out[l] += w * s;
      }
    }
  };

  for (std::size_t step = n_steps; step-- > 0;) {
    const std::size_t cell = step / static_cast<std::size_t>(lay.subnodes);
    // x1 = x0 + eta/2 (k1 + k2); xm = x0 + eta k1; k1 = F(x0), k2 = F(xm)
    for (std::size_t i = 0; i < dim; ++i) {
      k1bar[i] = 0.5 * lay.eta * xbar[i];
      k2bar[i] = 0.5 * lay.eta * xbar[i];
    }
    // k2 = F(xm; g_cell)
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const Vec h = model.shot_value(k, rec.xm[step]);
      gbar[cell * n_atoms + k] += model.marks.weight(k) * dot(h, k2bar);
    }
    jac_t_apply(rec.xm[step], cell, k2bar, xmbar);
    // xm = x0 + eta k1
    for (std::size_t i = 0; i < dim; ++i) k1bar[i] += lay.eta * xmbar[i];
    // k1 = F(x0; g_cell)
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const Vec h = model.shot_value(k, rec.x[step]);
      gbar[cell * n_atoms + k] += model.marks.weight(k) * dot(h, k1bar);
    }
    jac_t_apply(rec.x[step], cell, k1bar, tmp);
    for (std::size_t i = 0; i < dim; ++i) xbar[i] += xmbar[i] + tmp[i];
    if (!seeds[step].empty())
      for (std::size_t i = 0; i < dim; ++i) xbar[i] += seeds[step][i];
  }

  for (std::size_t i = 0; i < n_u; ++i) (*grad)[i] += gbar[i] * g[i];
  return value;
}

namespace {

struct InnerResult {
  int iterations = 0;
  double grad_norm = 0.0;
  double value = 0.0;
};

// Plain L-BFGS (history 8) with Armijo backtracking; deterministic.
template <typename F>
InnerResult lbfgs_minimize(F&& fg, Vec& u, int max_iter, double gtol) {
  const std::size_t n = u.size();
  std::deque<std::pair<Vec, Vec>> history;  // (s, y)
  Vec grad(n), new_grad(n), direction(n), trial(n);
  double value = fg(u, &grad);

  InnerResult res;
  for (int iter = 0; iter < max_iter; ++iter) {
    res.iterations = iter;
    res.grad_norm = norm_inf(grad);
    res.value = value;
    if (res.grad_norm <= gtol) return res;

    // two-loop recursion
    direction = grad;
    std::vector<double> alpha(history.size());
    for (std::size_t h = history.size(); h-- > 0;) {
      const auto& [s, y] = history[h];
      const double rho = 1.0 / dot(y, s);
      alpha[h] = rho * dot(s, direction);
      axpy(-alpha[h], y, direction);
    }
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      const double gamma = dot(s, y) / dot(y, y);
      for (double& v : direction) v *= gamma;
    }
    for (std::size_t h = 0; h < history.size(); ++h) {
      const auto& [s, y] = history[h];
      const double rho = 1.0 / dot(y, s);
      const double beta = rho * dot(y, direction);
      axpy(alpha[h] - beta, s, direction);
    }
    for (double& v : direction) v = -v;

    double slope = dot(grad, direction);
    if (!(slope < 0.0)) {
      direction = grad;
      for (double& v : direction) v = -v;
      slope = dot(grad, direction);
      history.clear();
    }

    double step = 1.0;
    double new_value = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      trial = u;
      axpy(step, direction, trial);
      new_value = fg(trial, &new_grad);
      if (std::isfinite(new_value) && new_value <= value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return res;  // stuck at numerical floor

    Vec s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial[i] - u[i];
      y[i] = new_grad[i] - grad[i];
    }
    if (dot(s, y) > 1e-18) {
      history.emplace_back(std::move(s), std::move(y));
      if (history.size() > 8) history.pop_front();
    }
    u = trial;
    grad = new_grad;
    value = new_value;
  }
  res.iterations = max_iter;
  res.grad_norm = norm_inf(grad);
  res.value = value;
  return res;
}

}  // namespace

double legendre_oracle(const ShotNoiseModel& model, const Vec& target, double horizon) {
  if (!model.state_independent)
    throw std::invalid_argument("legendre_oracle: requires a state-independent shot value");
  if (!(horizon > 0.0)) throw std::invalid_argument("legendre_oracle: horizon must be positive");
  const std::size_t dim = static_cast<std::size_t>(model.d);
  if (target.size() != dim)
    throw std::invalid_argument("legendre_oracle: target dimension mismatch");
  for (double v : target) {
    if (!std::isfinite(v)) throw std::invalid_argument("legendre_oracle: target must be finite");
    if (v < 0.0) throw InfeasibleError("legendre_oracle: target outside the reachable cone");
  }

  const std::size_t K = model.marks.size();
  std::vector<Vec> hs(K);
  const Vec origin(dim, 0.0);
  for (std::size_t k = 0; k < K; ++k) hs[k] = model.shot_value(k, origin);

  Vec v(dim);
  for (std::size_t i = 0; i < dim; ++i) v[i] = target[i] / horizon;

  if (nnls_distance(hs, v) > 1e-9 * (1.0 + norm2(v)))
    throw InfeasibleError("legendre_oracle: target outside the reachable cone");

  auto cgf = [&](const Vec& theta) {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::expm1(dot(theta, hs[k])) * model.marks.weight(k);
    return s;
  };

  if (norm2(v) == 0.0) {
    // sup_theta -Lambda(theta): push theta.h -> -inf for every active atom.
    double mass = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      if (norm2(hs[k]) > 0.0) mass += model.marks.weight(k);
    return horizon * mass;
  }

  if (dim == 1) {
    const double v0 = v[0];
    auto gfun = [&](double theta) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k)
        s += hs[k][0] * std::exp(theta * hs[k][0]) * model.marks.weight(k);
      return s - v0;
    };
    double lo = 0.0, hi = 0.0;
    if (gfun(0.0) >= 0.0) {
      lo = -1.0;
      while (gfun(lo) > 0.0) {
        lo *= 2.0;
        if (lo < -1e6)
          throw NonConvergenceError("legendre_oracle: dual bracket not found", 0.0, gfun(lo));
      }
      hi = 0.0;
    } else {
      hi = 1.0;
      while (gfun(hi) < 0.0) {
        hi *= 2.0;
        if (hi > 1e6)
          throw InfeasibleError("legendre_oracle: dual unbounded, target outside the cone");
      }
      lo = 0.0;
    }
    double theta = 0.5 * (lo + hi);
    for (int iter = 0; iter < 200; ++iter) {
      const double gval = gfun(theta);
      if (std::fabs(gval) <= 1e-13 * std::max(1.0, v0)) break;
      if (gval > 0.0)
        hi = theta;
      else
        lo = theta;
      double gp = 0.0;
      for (std::size_t k = 0; k < K; ++k)
        gp += hs[k][0] * hs[k][0] * std::exp(theta * hs[k][0]) * model.marks.weight(k);
      double next = gp > 0.0 ? theta - gval / gp : theta;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);  // damped: fall back to bisection
      if (std::fabs(next - theta) <= 1e-15 * (1.0 + std::fabs(theta))) {
        theta = next;
        break;
      }
      theta = next;
    }
    Vec th{theta};
    return horizon * (theta * v0 - cgf(th));
  }

  // d > 1: Newton ascent on the concave dual theta -> theta.v - Lambda(theta).
  Vec theta(dim, 0.0);
  auto dual = [&](const Vec& th) { return dot(th, v) - cgf(th); };
  Vec gradient(dim), step_dir(dim), trial(dim);
  std::vector<double> hess(dim * dim);
  double fval = dual(theta);
  for (int iter = 0; iter < 300; ++iter) {
    gradient = v;
    std::fill(hess.begin(), hess.end(), 0.0);
    double trace = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(dot(theta, hs[k])) * model.marks.weight(k);
      for (std::size_t i = 0; i < dim; ++i) {
        gradient[i] -= e * hs[k][i];
        for (std::size_t j = 0; j < dim; ++j) hess[i * dim + j] += e * hs[k][i] * hs[k][j];
      }
    }
    if (norm_inf(gradient) <= 1e-12 * std::max(1.0, norm_inf(v)))
      return horizon * dual(theta);
    for (std::size_t i = 0; i < dim; ++i) trace += hess[i * dim + i];
    for (std::size_t i = 0; i < dim; ++i)
      hess[i * dim + i] += 1e-10 * (1.0 + trace / static_cast<double>(dim));
    if (!solve_linear(hess, gradient, dim, step_dir)) {
      step_dir = gradient;  // steepest ascent fallback
    }
    double t = 1.0;
    bool moved = false;
    const double slope = dot(gradient, step_dir);
    for (int ls = 0; ls < 80; ++ls) {
      trial = theta;
      axpy(t, step_dir, trial);
      const double ftrial = dual(trial);
      if (std::isfinite(ftrial) && ftrial >= fval + 1e-4 * t * slope) {
        theta = trial;
        fval = ftrial;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) return horizon * fval;  // at the numerical optimum
    if (norm_inf(theta) > 1e7)
      throw InfeasibleError("legendre_oracle: dual diverges, target on or outside the cone");
  }
  throw NonConvergenceError("legendre_oracle: Newton ascent did not converge", 0.0,
                            norm_inf(gradient));
}

RateResult minimize_rate(const ShotNoiseModel& model, const RateConstraint& constraint,
                         const RateOptions& opts) {
  if (opts.max_outer < 1 || opts.max_inner < 1)
    throw std::invalid_argument("minimize_rate: iteration budgets must be positive");
  const FlowLayout lay = make_layout(model, constraint, opts);
  const std::size_t n_atoms = model.marks.size();
  const std::size_t dim = static_cast<std::size_t>(model.d);
  const std::size_t n_u = static_cast<std::size_t>(lay.cells) * n_atoms;
  const std::size_t n_r = lay.targets.size() * dim;

  Vec u(n_u, 0.0);  // g = 1, the zero-cost control
  Vec multipliers(n_r, 0.0);
  double penalty = opts.initial_penalty;

  RateResult out{.control = Control::constant(1.0, model.T, n_atoms,
                                              static_cast<std::size_t>(lay.cells))};
  double prev_resnorm = std::numeric_limits<double>::infinity();
  bool inner_converged = false;

  ForwardRecord rec;
  for (int outer = 1; outer <= opts.max_outer; ++outer) {
    auto fg = [&](const Vec& uu, Vec* gg) {
      return penalized_objective(model, constraint, opts, uu, multipliers, penalty, gg);
    };
    const InnerResult inner = lbfgs_minimize(fg, u, opts.max_inner, opts.grad_tol);
    out.inner_iterations_total += inner.iterations;
    out.final_grad_norm = inner.grad_norm;

    Vec g(n_u);
    for (std::size_t i = 0; i < n_u; ++i) g[i] = std::exp(u[i]);
    run_forward(model, lay, g, rec);
    const double resnorm = norm_inf(rec.residuals);

    double cost = 0.0;
    for (std::size_t j = 0; j < static_cast<std::size_t>(lay.cells); ++j)
      for (std::size_t k = 0; k < n_atoms; ++k)
        cost += lay.dt * model.marks.weight(k) * ell(g[j * n_atoms + k]);
    out.trace.push_back({outer, inner.iterations, penalty, resnorm, cost, inner.grad_norm});

    if (resnorm <= 0.5 * opts.constraint_tol) {
      inner_converged = true;
      break;
    }
    if (resnorm > 0.25 * prev_resnorm) penalty *= 2.0;
    for (std::size_t i = 0; i < n_r; ++i) multipliers[i] += penalty * rec.residuals[i];
    prev_resnorm = resnorm;
  }

  if (!inner_converged) {
    std::ostringstream os;
    os << "minimize_rate: residual " << norm_inf(rec.residuals) << " above tolerance "
       << opts.constraint_tol << " after " << opts.max_outer
       << " outer rounds (infeasible or stiff); final penalty " << penalty;
    throw InfeasibleError(os.str());
  }

  // Assemble g*, then recompute the path and cost through the fluid module.
  std::vector<double> grid(static_cast<std::size_t>(lay.cells) + 1);
  for (std::size_t j = 0; j < grid.size(); ++j)
    grid[j] = model.T * static_cast<double>(j) / lay.cells;
  grid.back() = model.T;
  std::vector<std::vector<double>> values(static_cast<std::size_t>(lay.cells),
                                          std::vector<double>(n_atoms));
  for (std::size_t j = 0; j < values.size(); ++j)
    for (std::size_t k = 0; k < n_atoms; ++k) values[j][k] = std::exp(u[j * n_atoms + k]);
  out.control = Control(std::move(grid), std::move(values));
  out.cost = cost_LT(out.control, model.marks, model.T);

  std::vector<double> wanted;
  if (constraint.is_terminal())
    wanted.push_back(model.T);
  else
    wanted = constraint.times;
  out.fluid_path = solve_controlled_ode(model, out.control, 1e-9, wanted);

  double residual = 0.0;
  if (constraint.is_terminal()) {
    residual = dist2(out.fluid_path.at(model.T), constraint.terminal);
  } else {
    for (std::size_t p = 0; p < constraint.times.size(); ++p)
      residual =
          std::max(residual, dist2(out.fluid_path.at(constraint.times[p]), constraint.states[p]));
  }
  out.residual = residual;
  out.converged = residual <= opts.constraint_tol;
  return out;
}

Control export_tilt(const RateResult& result) {
  if (!result.converged)
    throw std::logic_error("export_tilt: rate result did not converge");
  return result.control;
}

nlohmann::json RateResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const RateTraceRow& r : trace)
    rows.push_back({{"outer", r.outer},
                    {"inner_iterations", r.inner_iterations},
                    {"penalty", r.penalty},
                    {"residual", r.residual},
                    {"cost", r.cost},
                    {"grad_norm", r.grad_norm}});
  return nlohmann::json{{"cost", cost},
                        {"residual", residual},
                        {"control", control.to_json()},
                        {"trace", rows},
                        {"converged", converged},
                        {"inner_iterations_total", inner_iterations_total},
                        {"final_grad_norm", final_grad_norm}};
}

}  // namespace shotnoise
