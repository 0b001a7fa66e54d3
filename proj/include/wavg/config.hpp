#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wavg/experiments.hpp"
#include "wavg/train.hpp"

namespace wavg {

// Target task for linear evaluation: the source task with its class centers
// moved by `center_shift`.
struct TransferConfig {
  double center_shift = 2.0;
  std::uint64_t dataset_seed_offset = 0;  // added to dataset.seed
  bool supervised_reference = true;       // also train a full model on the target
};

// Everything a command needs besides the output directory.
struct ExperimentConfig {
  std::string experiment = "base";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  RunConfig run;
  std::vector<double> sweep_lrs{0.025, 0.1, 0.4, 1.6};
  LinearEvalConfig linear_eval;
  TransferConfig transfer;
};

// Strict parse: unknown keys, wrong types and a missing `dataset` section are
// ConfigErrors naming the dotted key. Omitted keys take the defaults above.
ExperimentConfig parse_config(const nlohmann::json& j);
// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& cfg);

// Built-in "base" and "noise" configs.
bool is_builtin_config(const std::string& name);
nlohmann::json builtin_config(const std::string& name);

// `source` is a builtin name or a JSON file path. Overrides are applied in
// order to the raw JSON before parsing.
nlohmann::json load_config_json(const std::string& source);
// `key=value`; the value is parsed as JSON and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);
// Comma-separated decays, e.g. "0" or "0.9,0.99".
std::vector<double> parse_decay_list(const std::string& text);
// Comma-separated list of integers, e.g. "1,2,3".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

// The target task used by linear evaluation.
DatasetSpec transfer_target(const ExperimentConfig& cfg);

}  // namespace wavg
