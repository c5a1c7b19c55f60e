// SPDX-License-Identifier: Apache-2.0
#include "percept/inference.hpp"

namespace percept {

EnsembleMode parse_ensemble_mode(const std::string& name) {
  if (name == "naive") return EnsembleMode::naive;
  if (name == "median" || name == "median_compilation" || name == "median-compilation") return EnsembleMode::median_compilation;
  throw ConfigError("unknown ensemble mode '" + name + "' (expected naive or median)");
}

std::string to_string(EnsembleMode mode) { return mode == EnsembleMode::naive ? "naive" : "median"; }

Preset preset_by_name(const std::string& name) {
  if (name == "paper-optimal") return Preset{};
  throw ConfigError("unknown preset '" + name + "' (available: paper-optimal)");
}

}  // namespace percept
