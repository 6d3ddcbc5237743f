// Flat key = value configuration files for the search CLI. Every training
// and search hyperparameter is surfaced here; unknown keys are errors.
#pragma once

#include <string>

#include "eas/search.hpp"

namespace eas {

struct RunConfig {
  SearchConfig search;
  // Start point: "table1" or a path to an eas-arch document.
  std::string start_net = "table1";
  // Optional weights for the start point; empty = train from scratch for
  // start_epochs before searching.
  std::string start_weights;
  int start_epochs = 20;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

}  // namespace eas
