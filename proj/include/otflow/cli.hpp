#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "otflow/data.hpp"
#include "otflow/trainer.hpp"

namespace otflow {

enum ExitCode { kExitOk = 0, kExitUserError = 1, kExitNumerical = 2 };

// TrainConfig plus the data source and output location. The data source is
// `csv` when set, else `normal` (standard-normal draws of that dimension) when
// positive, else the named toy.
struct RunConfig {
  TrainConfig train;
  std::string toy = "eight-gaussians";
  std::string csv;
  Index normal = 0;
  Index samples = 100000;  // rows drawn for toy and normal sources
  std::uint64_t data_seed = 0;
  std::string out = "run";
};

std::vector<std::pair<std::string, std::string>> run_entries(const RunConfig& config);
// Returns false for an unknown key; throws ConfigError for a bad value.
bool apply_run_entry(RunConfig& config, const std::string& key, const std::string& value);

// Flat text: one `key = value` per line, '#' starts a comment. Throws
// ConfigError naming the line for unknown keys or malformed lines.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_file(RunConfig& config, const std::string& path);

DatasetSplit load_run_data(const RunConfig& config);

// Entry point shared by the executable and the tests. `args` excludes the
// program name. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace otflow
