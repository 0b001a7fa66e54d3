#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "wavg/config.hpp"

namespace wavg {

// Exit statuses shared by all commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;

struct CommandContext {
  ExperimentConfig config;
  std::filesystem::path out = "runs";
  std::size_t threads = 1;
  bool verbose = false;

  std::filesystem::path experiment_dir() const { return out / config.experiment; }
};

// Layout under <out>/<experiment>/:
//   config.json                   resolved config, every default included
//   seed<k>/record.jsonl          RunRecord
//   seed<k>/ckpt_<model>.bin      checkpoints
//   seed<k>/preds_val_<model>.csv validation predictions
// Returns kExitFailure if any run failed; artifacts are kept regardless.
int cmd_train(const CommandContext& ctx, std::ostream& log);

// Reads a train directory and writes, next to it:
//   seed<k>/preds_test_<model>.csv, summary.csv, calibration.csv, churn.csv,
//   metrics.jsonl
// The test split is synthesized here and nowhere earlier. Throws InputError
// when the directory holds no completed run.
int cmd_report(const std::filesystem::path& experiment_dir, std::ostream& log);

// kind: bootstrap | constant_lr | bn_policy | lr_sweep. Writes
// ablate_<kind>.csv (plus curve tables where relevant).
int cmd_ablate(const std::string& kind, const CommandContext& ctx, std::ostream& log);

// Uses the baseline and ema_acc checkpoints written by `train` as frozen
// backbones for the shifted target task; writes linear_eval.csv.
int cmd_linear_eval(const CommandContext& ctx, std::ostream& log);

// train followed by report.
int cmd_churn(const CommandContext& ctx, std::ostream& log);

}  // namespace wavg
