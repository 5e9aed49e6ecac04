#include "shotnoise/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "shotnoise/detail/format.hpp"
#include "shotnoise/errors.hpp"
#include "shotnoise/rng.hpp"

namespace shotnoise {

namespace {

using detail::fmt17;

// H_eps evaluated directly at the fluid-scale state, avoiding the
// unscale/rescale round trip of evaluate_shot.
Vec shot_scaled(const ShotNoiseModel& model, double eps, double t, std::size_t atom,
                const Vec& x_scaled) {
  Vec out = model.hbar(t, atom, x_scaled);
  if (!model.zero_remainder) {
    const Vec r = model.remainder(eps, t, atom, x_scaled);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v = std::max(v, 0.0);
  return out;
}

void check_control(const Control& control, const MarkSpace& marks, double horizon,
                   const char* who) {
  if (control.atoms() != marks.size())
    throw std::invalid_argument(std::string(who) + ": control and mark space disagree on atoms");
  if (std::fabs(control.horizon() - horizon) > 1e-9 * std::max(1.0, horizon))
    throw std::invalid_argument(std::string(who) + ": control horizon does not match T");
}

}  // namespace

EventSet simulate_prm(const MarkSpace& marks, double horizon, double eps,
                      const Control* control, std::uint64_t seed, std::uint64_t stream) {
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    throw std::invalid_argument("simulate_prm: horizon must be finite and positive");
  if (!(eps > 0.0) || !std::isfinite(eps))
    throw std::invalid_argument("simulate_prm: eps must be finite and positive");
  if (control != nullptr) check_control(*control, marks, horizon, "simulate_prm");

  RngStream rng(seed, stream);
  EventSet out;
  out.epsilon = eps;
  out.seed = seed;
  out.stream = stream;
  out.control_tag = control ? "tilted" : "unit";

  const std::size_t n_cells = control ? control->cells() : 1;
  for (std::size_t j = 0; j < n_cells; ++j) {
    const double a = control ? control->time_grid()[j] : 0.0;
    const double b = control ? control->time_grid()[j + 1] : horizon;
    for (std::size_t k = 0; k < marks.size(); ++k) {
      const double g = control ? control->value(j, k) : 1.0;
      const double mean = g * marks.weight(k) * (b - a) / eps;
      if (mean == 0.0) continue;
      const std::uint64_t count = rng.poisson(mean);
      for (std::uint64_t c = 0; c < count; ++c)
        out.events.push_back({rng.uniform(a, b), static_cast<std::uint32_t>(k)});
    }
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const Event& x, const Event& y) { return x.time < y.time; });
  return out;
}

EventSet simulate_prm_thinned(const MarkSpace& marks, double horizon, double eps,
                              const std::function<double(double, std::size_t)>& g,
                              double gbar, std::uint64_t seed, std::uint64_t stream) {
  if (!(horizon > 0.0) || !std::isfinite(horizon))
    throw std::invalid_argument("simulate_prm_thinned: horizon must be finite and positive");
  if (!(eps > 0.0) || !std::isfinite(eps))
    throw std::invalid_argument("simulate_prm_thinned: eps must be finite and positive");
  if (!(gbar > 0.0) || !std::isfinite(gbar))
    throw std::invalid_argument("simulate_prm_thinned: gbar must be finite and positive");

  RngStream rng(seed, stream);
  EventSet out;
  out.epsilon = eps;
  out.seed = seed;
  out.stream = stream;
  out.control_tag = "tilted";
  for (std::size_t k = 0; k < marks.size(); ++k) {
    const std::uint64_t count = rng.poisson(gbar * marks.weight(k) * horizon / eps);
    for (std::uint64_t c = 0; c < count; ++c) {
      const double t = rng.uniform(0.0, horizon);
      const double ratio = g(t, k) / gbar;
      if (!(ratio >= 0.0))
        throw std::invalid_argument("simulate_prm_thinned: control must be nonnegative");
      if (ratio > 1.0 + 1e-12)
        throw std::invalid_argument("simulate_prm_thinned: control exceeds the bound gbar");
      if (rng.uniform01() < ratio) out.events.push_back({t, static_cast<std::uint32_t>(k)});
    }
  }
  std::stable_sort(out.events.begin(), out.events.end(),
                   [](const Event& x, const Event& y) { return x.time < y.time; });
  return out;
}

std::vector<double> default_output_grid(const EventSet& events, double horizon) {
  constexpr std::size_t kUniformPoints = 512;
  constexpr std::size_t kMaxEventPoints = 100000;
  std::vector<double> grid;
  grid.reserve(kUniformPoints + 1 + events.events.size());
  for (std::size_t i = 0; i <= kUniformPoints; ++i)
    grid.push_back(horizon * static_cast<double>(i) / kUniformPoints);
  if (events.events.size() <= kMaxEventPoints)
    for (const Event& e : events.events) grid.push_back(e.time);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

Path evolve_scaled_path(const ShotNoiseModel& model, EventSet events,
                        std::vector<double> grid) {
  const double eps = events.epsilon;
  if (!(eps > 0.0)) throw std::invalid_argument("evolve_scaled_path: eps must be positive");
  for (const Event& e : events.events) {
    if (e.time < 0.0 || e.time > model.T)
      throw std::invalid_argument("evolve_scaled_path: event outside [0, T]");
    if (e.atom >= model.marks.size())
      throw std::invalid_argument("evolve_scaled_path: event atom out of range");
  }
  if (!std::is_sorted(events.events.begin(), events.events.end(),
                      [](const Event& x, const Event& y) { return x.time < y.time; }))
    throw std::invalid_argument("evolve_scaled_path: events must be time-sorted");

  if (grid.empty()) {
    grid = default_output_grid(events, model.T);
  } else {
    grid.push_back(0.0);
    grid.push_back(model.T);
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    if (grid.front() < 0.0 || grid.back() > model.T)
      throw std::invalid_argument("evolve_scaled_path: grid outside [0, T]");
  }

  const std::size_t n = events.events.size();
  const std::size_t dim = static_cast<std::size_t>(model.d);
  const bool fast = model.instantaneous && model.zero_remainder;

  // Pre-jump states, frozen once in event order.
  std::vector<Vec> frozen(n, Vec(dim, 0.0));
  std::vector<Vec> jumps;  // fast path: the settled contribution of each event
  if (fast) {
    jumps.assign(n, Vec(dim, 0.0));
    Vec state(dim, 0.0);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j < n && events.events[j].time == events.events[i].time) ++j;
      for (std::size_t m = i; m < j; ++m) frozen[m] = state;
      for (std::size_t m = i; m < j; ++m) {
        const Vec h = model.shot_value(events.events[m].atom, frozen[m]);
        for (std::size_t c = 0; c < dim; ++c) state[c] += eps * std::max(h[c], 0.0);
        jumps[m] = state;  // cumulative, used as a prefix table below
      }
      i = j;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      Vec x(dim, 0.0);
      const double si = events.events[i].time;
      for (std::size_t m = 0; m < i; ++m) {
        const double sm = events.events[m].time;
        if (!(sm < si)) continue;  // ties see the common left limit
        const Vec term =
            shot_scaled(model, eps, (si - sm) / eps, events.events[m].atom, frozen[m]);
        for (std::size_t c = 0; c < dim; ++c) x[c] += eps * term[c];
      }
      frozen[i] = std::move(x);
    }
  }

  Path path;
  path.epsilon = eps;
  path.grid = std::move(grid);
  path.values.reserve(path.grid.size());

  if (fast) {
    for (double u : path.grid) {
      // events strictly before u have settled; H(0) = 0 at u itself
      const auto it = std::lower_bound(
          events.events.begin(), events.events.end(), u,
          [](const Event& e, double t) { return e.time < t; });
      const std::size_t idx = static_cast<std::size_t>(it - events.events.begin());
      path.values.push_back(idx == 0 ? Vec(dim, 0.0) : jumps[idx - 1]);
    }
  } else {
    for (double u : path.grid) {
      Vec x(dim, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double si = events.events[i].time;
        if (si > u) break;
        const Vec term = shot_scaled(model, eps, (u - si) / eps, events.events[i].atom, frozen[i]);
        for (std::size_t c = 0; c < dim; ++c) x[c] += eps * term[c];
      }
      path.values.push_back(std::move(x));
    }
  }

  path.events = std::move(events);
  return path;
}

double log_likelihood_weight(const EventSet& events, const Control& control,
                             const MarkSpace& marks, double horizon) {
  check_control(control, marks, horizon, "likelihood_weight");
  if (!(events.epsilon > 0.0))
    throw std::invalid_argument("likelihood_weight: eps must be positive");

  double log_w = 0.0;
  for (const Event& e : events.events) {
    if (e.atom >= marks.size())
      throw std::invalid_argument("likelihood_weight: event atom out of range");
    const double g = control.value(control.cell_of(e.time), e.atom);
    if (!(g > 0.0))
      throw DegenerateWeightError("likelihood_weight: event at t=" + fmt17(e.time) +
                                  " lands where the tilt vanishes");
    log_w -= std::log(g);
  }
  double integral = 0.0;
  for (std::size_t j = 0; j < control.cells(); ++j) {
    const double dt = control.cell_width(j);
    for (std::size_t k = 0; k < marks.size(); ++k)
      integral += dt * (control.value(j, k) - 1.0) * marks.weight(k);
  }
  return log_w + integral / events.epsilon;
}

double likelihood_weight(const EventSet& events, const Control& control,
                         const MarkSpace& marks, double horizon) {
  return std::exp(log_likelihood_weight(events, control, marks, horizon));
}

void write_path_csv(std::ostream& out, const Path& path) {
  out << "t";
  const std::size_t dim = path.values.empty() ? 0 : path.values.front().size();
  for (std::size_t i = 1; i <= dim; ++i) out << ",x" << i;
  out << "\n";
  for (std::size_t r = 0; r < path.grid.size(); ++r) {
    out << fmt17(path.grid[r]);
    for (double v : path.values[r]) out << "," << fmt17(v);
    out << "\n";
  }
}

void write_events_csv(std::ostream& out, const EventSet& events, const MarkSpace& marks) {
  out << "s,atom_id\n";
  for (const Event& e : events.events)
    out << fmt17(e.time) << "," << marks.atom(e.atom).id << "\n";
}

}  // namespace shotnoise
