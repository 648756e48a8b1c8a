#pragma once

// Command-line front end. Exit codes: 0 success, 2 usage or configuration
// error, 3 runtime abort.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "piecewise/data.hpp"
#include "piecewise/model.hpp"
#include "piecewise/trainer.hpp"

namespace piecewise::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Configuration file could not be validated.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct DataSelection {
  std::string source = "two_circles";  // two_circles | idx | csv
  // two_circles
  Index n_per_class = 300;
  double r_inner = 1.0;
  double r_outer = 2.0;
  double noise_sigma = 0.1;
  std::uint64_t data_seed = 0;
  // idx
  std::string images;
  std::string labels;
  std::vector<int> classes;
  Index per_class = 0;
  // csv
  std::string path;
  std::string label_column = "label";
  bool standardize = false;
};

struct RunConfig {
  MlpSpec model;  // input_dim is filled from the data
  TrainConfig train;
  DataSelection data;
  std::string output_dir = "run";
  int checkpoint_every = 0;
};

/// Parses and validates a RunConfig document. Unknown keys are rejected.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
/// Canonical JSON echo of a configuration.
std::string run_config_json(const RunConfig& cfg);

/// Dataset named by the selection, standardized when requested.
struct LoadedData {
  Dataset data;
  std::optional<Standardizer> transform;
};
LoadedData load_data(const DataSelection& sel);

/// Version string baked in at build time.
std::string version();

/// Runs one command line (args excludes the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

}  // namespace piecewise::cli
