#pragma once

#include <stdexcept>
#include <string>

namespace texbridge {

// process exit codes, shared by the CLI and the error types below
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitMissingArtifact = 3,
  kExitNumerical = 4,
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
  static constexpr int exit_code = kExitConfig;
};

struct MissingArtifactError : std::runtime_error {
  explicit MissingArtifactError(const std::string& msg) : std::runtime_error(msg) {}
  static constexpr int exit_code = kExitMissingArtifact;
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
  static constexpr int exit_code = kExitNumerical;
};

}  // namespace texbridge
