// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "mtel/model.hpp"
#include "mtel/synthgen.hpp"
#include "mtel/textio.hpp"
#include "mtel/training.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace mtel::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigOrIo = 2,  // also malformed command lines
  kMissingDataset = 3,
  kNonFiniteLoss = 4,
  kMissingAnnotations = 5,
};

// Everything a command needs, merged from one key-value config file and the
// command-line overrides.
struct RunConfig {
  synth::GeneratorConfig generator;
  ModelConfig model;
  train::TrainConfig train;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";
  double theta = 0.5;
  double iou_threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues echo() const;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> data;
  std::optional<int> epochs;
};

// Unknown keys are rejected so typos cannot silently fall back to defaults.
RunConfig load_run_config(const std::optional<std::filesystem::path>& config_path, const Overrides& overrides);
RunConfig run_config_from(const KeyValues& kv, const Overrides& overrides);

// Full command line including argv[0]; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mtel::cli
