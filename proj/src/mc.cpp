#include "shotnoise/mc.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "shotnoise/detail/format.hpp"
#include "shotnoise/errors.hpp"

namespace shotnoise {

namespace {

using detail::fmt17;

// Jump-lattice paths accumulate eps in floating point, so terminal
// thresholds (closed sets) are compared with a hair of absolute slack.
constexpr double kThresholdSlack = 1e-9;

// Fixed-size chunks keep the reduction order independent of the worker
// count, so reports are byte-stable for any --threads value.
constexpr std::uint64_t kChunk = 4096;

struct ChunkSums {
  double sum_y = 0.0;
  double sum_y2 = 0.0;
  double sum_w = 0.0;
  double sum_w2 = 0.0;
  std::uint64_t hits = 0;
};

template <typename Body>
std::vector<ChunkSums> run_chunked(std::uint64_t replications, int threads, Body&& body) {
  const std::uint64_t n_chunks = (replications + kChunk - 1) / kChunk;
  std::vector<ChunkSums> chunks(n_chunks);
  const int n_workers =
      std::max(1, std::min<int>(threads, static_cast<int>(std::min<std::uint64_t>(
                                             n_chunks, std::thread::hardware_concurrency()))));
  std::atomic<std::uint64_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&] {
    try {
      for (;;) {
        const std::uint64_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        const std::uint64_t lo = c * kChunk;
        const std::uint64_t hi = std::min(replications, lo + kChunk);
        ChunkSums acc;
        for (std::uint64_t r = lo; r < hi; ++r) body(r, acc);
        chunks[c] = acc;
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  };

  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  return chunks;
}

Vec terminal_state(const ShotNoiseModel& model, EventSet events) {
  Path path = evolve_scaled_path(model, std::move(events), {0.0, model.T});
  return path.values.back();
}

int effective_workers(int threads, std::uint64_t replications) {
  const std::uint64_t n_chunks = (replications + kChunk - 1) / kChunk;
  return std::max(1, std::min<int>(threads, static_cast<int>(std::min<std::uint64_t>(
                                                n_chunks, std::thread::hardware_concurrency()))));
}

}  // namespace

bool EventSpec::contains(const Vec& terminal) const {
  for (const auto& [coord, level] : thresholds) {
    if (coord < 0 || static_cast<std::size_t>(coord) >= terminal.size())
      throw std::invalid_argument("event spec: coordinate out of range");
    if (terminal[static_cast<std::size_t>(coord)] <
        level - kThresholdSlack * std::max(1.0, std::fabs(level)))
      return false;
  }
  return true;
}

std::string EventSpec::describe() const {
  std::ostringstream os;
  os << "{x:";
  for (std::size_t i = 0; i < thresholds.size(); ++i)
    os << (i ? " and " : " ") << "x" << thresholds[i].first + 1 << ">=" << thresholds[i].second;
  os << "}";
  return os.str();
}

MCReport estimate_naive(const ShotNoiseModel& model, double eps, const EventSpec& event,
                        std::uint64_t replications, std::uint64_t seed, int threads) {
  if (replications < 100)
    throw std::invalid_argument("estimate_naive: at least 100 replications required");
  const auto t0 = std::chrono::steady_clock::now();

  const auto chunks = run_chunked(replications, threads, [&](std::uint64_t r, ChunkSums& acc) {
    const EventSet ev = simulate_prm(model.marks, model.T, eps, nullptr, seed, r);
    if (event.contains(terminal_state(model, ev))) ++acc.hits;
  });

  std::uint64_t hits = 0;
  for (const ChunkSums& c : chunks) hits += c.hits;

  MCReport rep;
  rep.epsilon = eps;
  rep.event_desc = event.describe();
  rep.replications = replications;
  rep.method = "naive";
  rep.seed = seed;
  rep.workers = effective_workers(threads, replications);
  const double n = static_cast<double>(replications);
  rep.p_hat = static_cast<double>(hits) / n;
  rep.se = std::sqrt(std::max(0.0, rep.p_hat * (1.0 - rep.p_hat) / n));
  rep.rel_err = rep.p_hat > 0.0 ? rep.se / rep.p_hat : std::numeric_limits<double>::quiet_NaN();
  if (hits == 0) rep.clopper_pearson_upper = -std::expm1(std::log(0.05) / n);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

MCReport estimate_is(const ShotNoiseModel& model, double eps, const EventSpec& event,
                     const Control& tilt, std::uint64_t replications, std::uint64_t seed,
                     int threads) {
  if (replications < 100)
    throw std::invalid_argument("estimate_is: at least 100 replications required");
  for (std::size_t j = 0; j < tilt.cells(); ++j)
    for (std::size_t k = 0; k < tilt.atoms(); ++k)
      if (!(tilt.value(j, k) > 0.0))
        throw std::invalid_argument("estimate_is: tilt must be strictly positive on all cells");
  const auto t0 = std::chrono::steady_clock::now();

  const auto chunks = run_chunked(replications, threads, [&](std::uint64_t r, ChunkSums& acc) {
    EventSet ev = simulate_prm(model.marks, model.T, eps, &tilt, seed, r);
    const double w = std::exp(log_likelihood_weight(ev, tilt, model.marks, model.T));
    const bool hit = event.contains(terminal_state(model, std::move(ev)));
    const double y = hit ? w : 0.0;
    acc.sum_y += y;
    acc.sum_y2 += y * y;
    acc.sum_w += w;
    acc.sum_w2 += w * w;
    if (hit) ++acc.hits;
  });

  double sy = 0.0, sy2 = 0.0, sw = 0.0, sw2 = 0.0;
  for (const ChunkSums& c : chunks) {
    sy += c.sum_y;
    sy2 += c.sum_y2;
    sw += c.sum_w;
    sw2 += c.sum_w2;
  }

  MCReport rep;
  rep.epsilon = eps;
  rep.event_desc = event.describe();
  rep.replications = replications;
  rep.method = "is";
  rep.seed = seed;
  rep.workers = effective_workers(threads, replications);
  const double n = static_cast<double>(replications);
  rep.p_hat = sy / n;
  rep.se = std::sqrt(std::max(0.0, (sy2 - n * rep.p_hat * rep.p_hat) / (n - 1.0) / n));
  rep.rel_err = rep.p_hat > 0.0 ? rep.se / rep.p_hat : std::numeric_limits<double>::quiet_NaN();
  rep.mean_weight = sw / n;
  rep.se_weight =
      std::sqrt(std::max(0.0, (sw2 - n * rep.mean_weight * rep.mean_weight) / (n - 1.0) / n));
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

double poisson_tail_exact(double mean, std::uint64_t k) {
  if (!(mean > 0.0) || !std::isfinite(mean))
    throw std::invalid_argument("poisson_tail_exact: mean must be finite and positive");
  if (k == 0) return 1.0;
  const double kd = static_cast<double>(k);

  if (kd <= mean) {
    // Left side: 1 - P(N <= k-1), summed descending from the largest term.
    const double log_t = (kd - 1.0) * std::log(mean) - mean - std::lgamma(kd);
    if (log_t < -745.0) return 1.0;  // CDF below double precision
    double term = std::exp(log_t);
    double sum = 0.0;
    for (std::uint64_t n = k - 1;; --n) {
      sum += term;
      if (n == 0 || term < sum * 1e-18) break;
      term *= static_cast<double>(n) / mean;
    }
    return std::max(0.0, 1.0 - sum);
  }

  // Right side: t_k * (1 + sum of descending ratio products).
  const double log_t = kd * std::log(mean) - mean - std::lgamma(kd + 1.0);
  double factor = 1.0;
  double term = 1.0;
  for (std::uint64_t i = 1; i < 100000000ULL; ++i) {
    term *= mean / (kd + static_cast<double>(i));
    factor += term;
    if (term < factor * 1e-18) break;
  }
  const double log_p = log_t + std::log(factor);
  return log_p < -745.0 ? 0.0 : std::exp(log_p);
}

DecayTable ldp_decay_table(const ShotNoiseModel& model, const EventSpec& event,
                           std::vector<double> epsilons, const std::string& method,
                           const Control* tilt, std::uint64_t replications, std::uint64_t seed,
                           int threads) {
  if (epsilons.empty()) throw std::invalid_argument("ldp_decay_table: epsilons required");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] > 0.0)) throw std::invalid_argument("ldp_decay_table: epsilons must be positive");
    if (i > 0 && !(epsilons[i] < epsilons[i - 1]))
      throw std::invalid_argument("ldp_decay_table: epsilons must be strictly decreasing");
  }

  DecayTable table;
  for (std::size_t row = 0; row < epsilons.size(); ++row) {
    const double eps = epsilons[row];
    DecayRow r;
    r.epsilon = eps;
    if (method == "exact") {
      if (model.d != 1 || !model.instantaneous || !model.state_independent ||
          !model.zero_remainder)
        throw std::invalid_argument(
            "ldp_decay_table: exact tails need a 1-d instantaneous state-independent model");
      if (event.thresholds.size() != 1 || event.thresholds[0].first != 0)
        throw std::invalid_argument("ldp_decay_table: exact tails need a single threshold on x1");
      const Vec origin(1, 0.0);
      const double h0 = model.shot_value(0, origin)[0];
      if (!(h0 > 0.0))
        throw std::invalid_argument("ldp_decay_table: exact tails need a positive shot value");
      for (std::size_t k = 1; k < model.marks.size(); ++k)
        if (std::fabs(model.shot_value(k, origin)[0] - h0) > 1e-12 * h0)
          throw std::invalid_argument("ldp_decay_table: exact tails need a common shot value");
      const double a = event.thresholds[0].second;
      const double mean = model.marks.total_mass() * model.T / eps;
      const double kf = std::max(0.0, std::ceil(a / (eps * h0) - 1e-9));
      r.p_hat = poisson_tail_exact(mean, static_cast<std::uint64_t>(kf));
      r.se = 0.0;
    } else if (method == "naive") {
      const MCReport rep = estimate_naive(model, eps, event, replications, seed + row, threads);
      r.p_hat = rep.p_hat;
      r.se = rep.se;
    } else if (method == "is") {
      if (tilt == nullptr) throw std::invalid_argument("ldp_decay_table: is method needs a tilt");
      const MCReport rep = estimate_is(model, eps, event, *tilt, replications, seed + row, threads);
      r.p_hat = rep.p_hat;
      r.se = rep.se;
    } else {
      throw std::invalid_argument("ldp_decay_table: method must be naive, is or exact");
    }
    r.flagged = !(r.p_hat > 0.0);
    r.neg_eps_log_p =
        r.flagged ? std::numeric_limits<double>::infinity() : -eps * std::log(r.p_hat);
    table.rows.push_back(r);
  }

  // Least-squares line through (eps, -eps log p); the intercept extrapolates
  // the decay rate to eps = 0.
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  std::size_t m = 0;
  for (const DecayRow& r : table.rows) {
    if (r.flagged) continue;
    sx += r.epsilon;
    sy += r.neg_eps_log_p;
    sxx += r.epsilon * r.epsilon;
    sxy += r.epsilon * r.neg_eps_log_p;
    ++m;
  }
  if (m >= 2) {
    const double denom = static_cast<double>(m) * sxx - sx * sx;
    if (denom > 0.0) {
      table.slope = (static_cast<double>(m) * sxy - sx * sy) / denom;
      table.intercept = (sy - table.slope * sx) / static_cast<double>(m);
      table.extrapolation_valid = true;
    }
  }
  return table;
}

std::string DecayTable::csv() const {
  std::ostringstream os;
  os << "epsilon,p_hat,se,neg_eps_log_p\n";
  for (const DecayRow& r : rows)
    os << fmt17(r.epsilon) << "," << fmt17(r.p_hat) << "," << fmt17(r.se) << ","
       << fmt17(r.neg_eps_log_p) << "\n";
  return os.str();
}

nlohmann::json MCReport::to_json() const {
  return nlohmann::json{{"epsilon", epsilon},
                        {"event", event_desc},
                        {"replications", replications},
                        {"p_hat", p_hat},
                        {"se", se},
                        {"rel_err", rel_err},
                        {"method", method},
                        {"seed", seed},
                        {"wall_seconds", wall_seconds},
                        {"workers", workers},
                        {"clopper_pearson_upper", clopper_pearson_upper},
                        {"mean_weight", mean_weight},
                        {"se_weight", se_weight}};
}

std::string MCReport::csv_header() {
  return "epsilon,method,replications,p_hat,se,rel_err,seed,workers,clopper_pearson_upper,"
         "mean_weight,se_weight";
}

std::string MCReport::csv_row() const {
  std::ostringstream os;
  os << fmt17(epsilon) << "," << method << "," << replications << "," << fmt17(p_hat) << ","
     << fmt17(se) << "," << fmt17(rel_err) << "," << seed << "," << workers << ","
     << fmt17(clopper_pearson_upper) << "," << fmt17(mean_weight) << "," << fmt17(se_weight);
  return os.str();
}

}  // namespace shotnoise
