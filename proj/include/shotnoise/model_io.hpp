#pragma once

#include <string>

#include "json.hpp"
#include "shotnoise/model.hpp"

namespace shotnoise {

/// Builds a model from its JSON description. Shot shapes come from a closed
/// catalogue of parametric families; see README for the schema. Unknown keys
/// are rejected.
ShotNoiseModel model_from_json(const nlohmann::json& spec);

ShotNoiseModel model_from_json_text(const std::string& text);

ShotNoiseModel model_from_file(const std::string& path);

}  // namespace shotnoise
