#pragma once

// INI-style configuration: [section] headers, key = value lines, comments
// with '#' or ';'. Unknown sections or keys are errors.

#include "owtta/adapt.hpp"
#include "owtta/backbone.hpp"
#include "owtta/stream.hpp"

#include <string>

namespace owtta {

struct FullConfig {
  BackboneConfig backbone;
  StreamConfig stream;
  AdaptConfig adapt;

  void validate() const;
};

FullConfig parse_config_file(const std::string& path);
FullConfig parse_config_text(const std::string& text);

/// Renders a config back to the file format (defaults for a fresh struct).
std::string config_to_text(const FullConfig& cfg);

}  // namespace owtta
