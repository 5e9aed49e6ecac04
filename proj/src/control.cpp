#include "shotnoise/control.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace shotnoise {

Control::Control(std::vector<double> time_grid, std::vector<std::vector<double>> values)
    : time_grid_(std::move(time_grid)), values_(std::move(values)) {
  if (time_grid_.size() < 2) throw std::invalid_argument("control: time grid needs >= 2 nodes");
  if (time_grid_.front() != 0.0) throw std::invalid_argument("control: time grid must start at 0");
  for (std::size_t j = 0; j + 1 < time_grid_.size(); ++j)
    if (!(time_grid_[j] < time_grid_[j + 1]))
      throw std::invalid_argument("control: time grid must be strictly increasing");
  if (!std::isfinite(time_grid_.back()))
    throw std::invalid_argument("control: horizon must be finite");
  if (values_.size() != time_grid_.size() - 1)
    throw std::invalid_argument("control: one value row per time cell required");
  const std::size_t n_atoms = values_.front().size();
  if (n_atoms == 0) throw std::invalid_argument("control: at least one atom column required");
  for (const auto& row : values_) {
    if (row.size() != n_atoms) throw std::invalid_argument("control: ragged value rows");
    for (double g : row)
      if (!std::isfinite(g) || g < 0.0)
        throw std::invalid_argument("control: values must be finite and nonnegative");
  }
}

Control Control::constant(double level, double horizon, std::size_t n_atoms,
                          std::size_t n_cells) {
  if (n_cells == 0) throw std::invalid_argument("control: n_cells must be positive");
  std::vector<double> grid(n_cells + 1);
  for (std::size_t j = 0; j <= n_cells; ++j)
    grid[j] = horizon * static_cast<double>(j) / static_cast<double>(n_cells);
  grid.back() = horizon;
  return Control(std::move(grid),
                 std::vector<std::vector<double>>(n_cells, std::vector<double>(n_atoms, level)));
}

std::size_t Control::cell_of(double s) const {
  if (s <= time_grid_.front()) return 0;
  if (s >= time_grid_.back()) return values_.size() - 1;
  const auto it = std::upper_bound(time_grid_.begin(), time_grid_.end(), s);
  return static_cast<std::size_t>(it - time_grid_.begin()) - 1;
}

nlohmann::json Control::to_json() const {
  return nlohmann::json{{"time_grid", time_grid_}, {"values", values_}};
}

Control Control::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("time_grid") || !j.contains("values"))
    throw std::invalid_argument("control JSON needs 'time_grid' and 'values'");
  for (const auto& [key, _] : j.items())
    if (key != "time_grid" && key != "values")
      throw std::invalid_argument("control JSON: unknown key '" + key + "'");
  return Control(j.at("time_grid").get<std::vector<double>>(),
                 j.at("values").get<std::vector<std::vector<double>>>());
}

}  // namespace shotnoise
