#pragma once

#include <stdexcept>
#include <string>

namespace shotnoise {

// An iterative solver (Picard sweep, Newton ascent) ran out of iterations.
class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(const std::string& what, double contraction, double residual)
      : std::runtime_error(what), contraction_(contraction), residual_(residual) {}

  double contraction() const noexcept { return contraction_; }
  double residual() const noexcept { return residual_; }

 private:
  double contraction_;
  double residual_;
};

// The requested target is outside the reachable set, or the constrained
// minimization could not push the residual below tolerance.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A realized event landed where the tilt vanishes; the change of measure
// is inadmissible for this sample.
class DegenerateWeightError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A run configuration could not be parsed or fails validation.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace shotnoise
