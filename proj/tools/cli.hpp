#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace sscaps::cli {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  /// The run finished but a validation failed (gradient check, divergence).
  kExitFailed = 1,
  /// Bad flags, bad config values or an unusable output directory.
  kExitUsage = 2,
  /// Unreadable or malformed input files.
  kExitData = 3,
};

/// Environment variable naming the root under which run directories are
/// created when `--out` is not given. Defaults to `./runs`.
inline constexpr const char* kRunsRootEnv = "SSCAPS_RUNS_DIR";

/// File name of the run manifest inside every run directory.
inline constexpr const char* kRunManifestFile = "run.json";
inline constexpr const char* kRunManifestFormat = "sscaps-run";

/// Runs one invocation. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Overlays `overlay` onto `base`, recursing into objects. Keys that do not
/// exist in `base` are rejected, so misspelled config keys fail loudly.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay,
                  const std::string& where = "");

/// Reads a config file. A run manifest is accepted too, in which case its
/// frozen config snapshot is returned.
nlohmann::json read_config_file(const std::filesystem::path& path);

}  // namespace sscaps::cli
