#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "shotnoise/control.hpp"
#include "shotnoise/model.hpp"
#include "shotnoise/simulate.hpp"

namespace shotnoise {

/// Terminal rare-event set {x : x_i >= a_i for every listed coordinate}.
struct EventSpec {
  std::vector<std::pair<int, double>> thresholds;

  bool contains(const Vec& terminal) const;
  std::string describe() const;
};

struct MCReport {
  double epsilon = 0.0;
  std::string event_desc;
  std::uint64_t replications = 0;
  double p_hat = 0.0;
  double se = 0.0;
  double rel_err = 0.0;  // se / p_hat, NaN when p_hat == 0
  std::string method;    // "naive" or "is"
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  int workers = 1;
  // One-sided 95% Clopper-Pearson upper bound, reported when a naive run
  // scores zero hits.
  double clopper_pearson_upper = 0.0;
  // Tilt diagnostics (is only); the mean weight estimates the martingale
  // identity E[E_T] = 1.
  double mean_weight = 0.0;
  double se_weight = 0.0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;  // excludes wall time so artifacts stay byte-stable
};

MCReport estimate_naive(const ShotNoiseModel& model, double eps, const EventSpec& event,
                        std::uint64_t replications, std::uint64_t seed, int threads = 1);

MCReport estimate_is(const ShotNoiseModel& model, double eps, const EventSpec& event,
                     const Control& tilt, std::uint64_t replications, std::uint64_t seed,
                     int threads = 1);

/// P(N >= k) for N ~ Poisson(mean), by stable summation of the survival
/// series (complement side below the mean). Relative error <= 1e-12.
double poisson_tail_exact(double mean, std::uint64_t k);

struct DecayRow {
  double epsilon = 0.0;
  double p_hat = 0.0;
  double se = 0.0;
  double neg_eps_log_p = 0.0;
  bool flagged = false;  // zero-hit row, excluded from the extrapolation
};

struct DecayTable {
  std::vector<DecayRow> rows;
  double intercept = 0.0;  // least-squares extrapolation of -eps log p to eps = 0
  double slope = 0.0;
  bool extrapolation_valid = false;

  std::string csv() const;
};

/// Decay-rate table across epsilons. method is "naive", "is" (requires a
/// tilt) or "exact" (closed-form Poisson tails; needs a one-dimensional
/// instantaneous state-independent model with a common shot value).
DecayTable ldp_decay_table(const ShotNoiseModel& model, const EventSpec& event,
                           std::vector<double> epsilons, const std::string& method,
                           const Control* tilt, std::uint64_t replications,
                           std::uint64_t seed, int threads = 1);

}  // namespace shotnoise
