#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace shotnoise {

/// Nonnegative intensity multiplier g(s,z), piecewise constant on a time
/// grid x mark atoms. values[j][k] is the level on cell j for atom k.
class Control {
 public:
  Control(std::vector<double> time_grid, std::vector<std::vector<double>> values);

  static Control constant(double level, double horizon, std::size_t n_atoms,
                          std::size_t n_cells = 1);

  std::size_t cells() const noexcept { return values_.size(); }
  std::size_t atoms() const noexcept { return values_.empty() ? 0 : values_[0].size(); }
  const std::vector<double>& time_grid() const noexcept { return time_grid_; }
  double horizon() const noexcept { return time_grid_.back(); }
  double cell_width(std::size_t j) const { return time_grid_[j + 1] - time_grid_[j]; }

  double value(std::size_t cell, std::size_t atom) const { return values_[cell][atom]; }

  /// Cell containing s; the last cell is closed on the right.
  std::size_t cell_of(double s) const;

  double at(double s, std::size_t atom) const { return values_[cell_of(s)][atom]; }

  nlohmann::json to_json() const;
  static Control from_json(const nlohmann::json& j);

 private:
  std::vector<double> time_grid_;
  std::vector<std::vector<double>> values_;
};

}  // namespace shotnoise
