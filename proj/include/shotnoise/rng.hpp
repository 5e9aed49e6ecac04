#pragma once

#include <array>
#include <cstdint>

namespace shotnoise {

/// Philox4x64-10 counter-based pseudo-random stream.
///
/// Each (seed, stream) pair indexes an independent stream, so replications
/// can be distributed across workers without shared state and without any
/// dependence on scheduling order. Output matches the reference
/// Philox4x64-10 keyed as key = {seed, stream} with the 256-bit counter
/// incremented before each block.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform01();

  /// Uniform double in (0, 1); safe to feed into log().
  double uniform_pos();

  /// Uniform double in [a, b).
  double uniform(double a, double b);

  /// Poisson draw. Inversion by multiplication below mean 10, Hormann's
  /// PTRS transformed rejection above.
  std::uint64_t poisson(double mean);

 private:
  void refill();

  std::array<std::uint64_t, 4> counter_;
  std::array<std::uint64_t, 2> key_;
  std::array<std::uint64_t, 4> buffer_;
  unsigned buffer_pos_;
};

}  // namespace shotnoise
