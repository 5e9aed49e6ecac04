#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "shotnoise/control.hpp"
#include "shotnoise/model.hpp"

namespace shotnoise {

struct Event {
  double time = 0.0;
  std::uint32_t atom = 0;
};

/// Realized points of the (possibly controlled) Poisson random measure.
struct EventSet {
  double epsilon = 1.0;
  std::vector<Event> events;  // time-sorted, ties kept in insertion order
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string control_tag;  // "unit" or "tilted"
};

/// Draws the PRM with intensity eps^-1 g nu_T: per time cell and atom, a
/// Poisson count with mean eps^-1 g_jk nu_k dt_j and uniform placement.
/// Exact in law for piecewise-constant g and finite nu. control == nullptr
/// means the unit control g == 1. Deterministic given (seed, stream).
EventSet simulate_prm(const MarkSpace& marks, double horizon, double eps,
                      const Control* control, std::uint64_t seed,
                      std::uint64_t stream = 0);

/// Alternative generator for controls that are not piecewise constant:
/// candidates drawn from the dominating intensity eps^-1 gbar nu and thinned
/// with acceptance probability g(s,k)/gbar. Requires g <= gbar.
EventSet simulate_prm_thinned(const MarkSpace& marks, double horizon, double eps,
                              const std::function<double(double, std::size_t)>& g,
                              double gbar, std::uint64_t seed, std::uint64_t stream = 0);

struct Path {
  double epsilon = 1.0;
  std::vector<double> grid;
  std::vector<Vec> values;
  EventSet events;

  const Vec& terminal() const { return values.back(); }
};

/// 512 uniform points plus all event times while the event count stays
/// below 100000; beyond that, the uniform grid only.
std::vector<double> default_output_grid(const EventSet& events, double horizon);

/// Evolves X(t) = eps * sum_{s_i <= t} H_eps(eps^-1(t - s_i), z_i, eps^-1 X(s_i-)).
/// Pre-jump states are frozen once, in event order; instantaneous shapes use
/// an O(events) running sum, general shapes cost O(events^2 + events*grid).
Path evolve_scaled_path(const ShotNoiseModel& model, EventSet events,
                        std::vector<double> grid = {});

/// log of the dPbar/dQ weight attached to a realization drawn under the
/// tilted intensity eps^-1 g nu_T:
///   sum_i log(1/g(s_i,z_i)) + eps^-1 int (g - 1) dnu_T.
/// Throws DegenerateWeightError if an event sits where g vanishes.
double log_likelihood_weight(const EventSet& events, const Control& control,
                             const MarkSpace& marks, double horizon);

double likelihood_weight(const EventSet& events, const Control& control,
                         const MarkSpace& marks, double horizon);

/// CSV writers; all floating point at 17 significant digits.
void write_path_csv(std::ostream& out, const Path& path);
void write_events_csv(std::ostream& out, const EventSet& events, const MarkSpace& marks);

}  // namespace shotnoise
