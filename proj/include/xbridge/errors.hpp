#pragma once

#include <stdexcept>
#include <string>

namespace xbridge {

// Invalid experiment configuration (bad field values, inconsistent dims).
// Distinct from std::invalid_argument (misused API) and std::runtime_error
// (numeric/IO failure) so the CLI can map it to its own exit code.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace xbridge
