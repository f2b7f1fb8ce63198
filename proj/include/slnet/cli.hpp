#pragma once

// Command-line front end: synth, train, eval, infer, bench, netscore.

#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "slnet/train.hpp"

namespace slnet {

/// Exit codes of run_command.
enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_numeric = 3 };

/// Everything a `train` config file can set: model keys plus the keys below.
struct RunSpec {
  ModelConfig model;
  TrainConfig train;
  std::string preset;  ///< applied before every other key, wherever it appears
  std::string data;    ///< dataset directory
  std::string out = "model.slck";
  std::string log;  ///< defaults to `<out>.log`
  bool normalize = true;
  std::set<std::string> explicit_keys;  ///< keys present in the file
};

/// Parses `key = value` lines with `#` comments. Unknown keys and malformed
/// values throw ConfigError naming the line.
RunSpec parse_run_config(const std::string& text);
/// Keys accepted besides the model keys.
const std::vector<std::string>& run_config_keys();
ModelConfig preset_config(const std::string& name);

/// Worker threads allowed by SLNET_THREADS (default: the hardware concurrency).
std::size_t thread_cap();

/// Runs one command (`args` excludes the program name) and returns an ExitCode.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace slnet
