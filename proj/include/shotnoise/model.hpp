#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "shotnoise/linalg.hpp"

namespace shotnoise {

struct Atom {
  std::string id;
  Vec payload;
  double weight = 0.0;  // nu({z}), strictly positive
};

/// Finite atomic mark space. nu is the weighted counting measure on the
/// atoms; the total mass is finite by construction.
class MarkSpace {
 public:
  explicit MarkSpace(std::vector<Atom> atoms);

  std::size_t size() const noexcept { return atoms_.size(); }
  const Atom& atom(std::size_t k) const { return atoms_[k]; }
  double weight(std::size_t k) const { return atoms_[k].weight; }
  double total_mass() const noexcept { return total_mass_; }
  std::optional<std::size_t> index_of(std::string_view id) const;

 private:
  std::vector<Atom> atoms_;
  double total_mass_ = 0.0;
  std::unordered_map<std::string, std::size_t> index_;
};

/// State-dependent shot noise model.
///
/// hbar and shot_value take the state on the fluid scale (the same variable
/// the fluid equation evolves); evaluate_shot feeds hbar the product eps*x
/// when called with the blown-up state x.
struct ShotNoiseModel {
  int d = 1;
  double T = 1.0;
  MarkSpace marks;

  std::function<Vec(double t, std::size_t atom, const Vec& x)> hbar;
  std::function<Vec(double eps, double t, std::size_t atom, const Vec& x)> remainder;
  std::function<Vec(std::size_t atom, const Vec& x)> shot_value;  // h
  // Optional analytic d x d Jacobian of h in x; the rate optimizer falls
  // back to central differences when absent.
  std::function<void(std::size_t atom, const Vec& x, Mat& jac)> shot_value_jac;
  std::function<double(std::size_t atom)> lipschitz;  // L_h
  std::function<double(std::size_t atom)> growth;     // M_h
  std::function<double(std::size_t atom)> varsigma;   // bounds ||R_eps|| / (||x||+1)

  // Structure hints set by the factories; enable fast paths and oracles.
  bool instantaneous = false;      // hbar(t,z,x) = h(z,x) * 1{t>0}
  bool state_independent = false;  // h(z,x) does not depend on x
  bool zero_remainder = false;
};

/// Finite sample sets on which the model conditions are linted.
struct CheckGrid {
  std::vector<double> times;  // strictly positive; 0 is always checked separately
  std::vector<Vec> states;
  std::vector<std::pair<Vec, Vec>> state_pairs;
  std::vector<double> epsilons;

  bool empty() const;
  static CheckGrid defaults(const ShotNoiseModel& model, std::uint64_t seed = 2026);
};

struct CheckResult {
  std::string condition;    // "a", "b", "d", "f", "g"
  std::string description;
  bool passed = true;
  double worst = 0.0;   // largest violation found (0 when clean)
  std::string witness;  // worst offending sample, empty when clean
};

struct ValidationReport {
  std::vector<CheckResult> checks;
  bool accepted() const;
};

/// Lints the model against its declared envelopes on the sampled grid.
ValidationReport validate_model(const ShotNoiseModel& model, const CheckGrid& grid);

/// H_eps(t,z,x) = hbar(t,z,eps*x) + R_eps(t,z,eps*x), clamped at 0
/// coordinate-wise so the state stays in the nonnegative orthant.
Vec evaluate_shot(const ShotNoiseModel& model, double eps, double t, std::size_t atom,
                  const Vec& x);

/// Max of ||hbar(t,z,x) - h(z,x)|| over sampled t >= t_max and ||x|| <= state_bound.
double check_shot_value_limit(const ShotNoiseModel& model, std::size_t atom,
                              double state_bound, double t_max);

}  // namespace shotnoise
