#pragma once

#include <filesystem>
#include <json.hpp>
#include <stdexcept>

#include "sharplens/sweep.hpp"

namespace sharplens {

/// Malformed or unknown configuration. Maps to a usage error in the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Overlays the keys of `j` onto `base`. Unknown keys are errors.
SweepConfig config_from_json(const nlohmann::json& j, SweepConfig base = {});
SweepConfig load_config(const std::filesystem::path& path);

/// Every key, in the same layout config_from_json reads.
nlohmann::ordered_json config_to_json(const SweepConfig& config);

}  // namespace sharplens
