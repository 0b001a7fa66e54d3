#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wavg/averaging.hpp"
#include "wavg/checkpoint.hpp"
#include "wavg/data.hpp"
#include "wavg/model.hpp"
#include "wavg/optim.hpp"

namespace wavg {

struct ModelConfig {
  std::vector<std::size_t> hidden_widths{128, 128};
  std::vector<bool> batchnorm{true, true};
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::kWarmupCosine;
  double base_lr = 0.1;
  std::size_t warmup_epochs = 3;
  std::vector<std::size_t> milestones;
  double step_factor = 0.2;
  // Hold the rate fixed after this global step (constant-lr ablation).
  std::optional<std::size_t> freeze_after_step;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
};

struct EmaConfig {
  std::vector<double> decays{0.968, 0.984, 0.992, 0.996, 0.998};
  std::size_t sampling_period = 16;
  bool warmup = true;
  bool update_after_step = true;
  // Also evaluate every decay with BN statistics recomputed each epoch.
  bool track_recompute = false;
};

struct SwaConfig {
  bool enabled = true;
  // Uniform averaging starts at epoch ceil(start_fraction * epochs).
  double start_fraction = 0.75;
};

struct BootstrapConfig {
  bool enabled = false;
  // Which bank entry is copied into the training iterate after each epoch is
  // evaluated (not after the last); unset means the largest decay.
  std::optional<double> decay;
  bool keep_momentum = false;
};

// Fully determines a run given one seed.
struct RunConfig {
  DatasetSpec dataset;
  std::size_t n_test = 2000;
  std::optional<NoiseSpec> noise;
  double train_fraction = 0.8;
  ModelConfig model;
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  // Per-epoch clean/noisy train accuracy; forced on when noise is present.
  bool track_train_accuracy = false;
  ScheduleConfig schedule;
  SgdConfig sgd;
  EmaConfig ema;
  SwaConfig swa;
  BootstrapConfig bootstrap;

  MlpSpec mlp_spec() const;
  Schedule make_schedule(std::size_t steps_per_epoch) const;
  std::size_t swa_start_epoch() const;
  // Throws ConfigError naming the offending key.
  void validate() const;
};

// Train pool (after label noise) and its train/validation split.
struct PreparedData {
  Dataset pool;
  TrainValSplit split;
};
PreparedData prepare_data(const RunConfig& config);

struct ModelMetrics {
  std::optional<double> val_acc;
  std::optional<double> val_loss;
  std::optional<double> val_acc_recompute;
  std::optional<double> val_loss_recompute;
  std::optional<double> train_acc_clean;
  std::optional<double> train_acc_noisy;
  // Evaluation on an optional tracking set, reported for curves only.
  std::optional<double> track_acc;
  std::optional<double> track_loss;

  friend bool operator==(const ModelMetrics&, const ModelMetrics&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the initial model, before any step
  double lr = 0.0;        // learning rate of the last step taken
  double train_loss = 0.0;
  std::size_t steps = 0;  // global steps completed
  bool ema_synced = false;  // the last step of this epoch was an EMA update
  ModelMetrics baseline;
  std::vector<ModelMetrics> ema;  // one per decay, BN stats tracked by EMA
  std::optional<ModelMetrics> swa;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct Verdict {
  std::size_t epoch = 0;
  std::size_t decay_index = 0;
  double decay = 0.0;
  double value = 0.0;

  friend bool operator==(const Verdict&, const Verdict&) = default;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<double> decays;
  std::vector<EpochRecord> epochs;
  std::optional<Verdict> best_val_acc;
  std::optional<Verdict> lowest_val_loss;
  bool failed = false;
  std::string diagnostic;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct TrainOptions {
  std::string run_id;
  // Evaluated each epoch into ModelMetrics::track_*; never used for any
  // selection decision.
  const Dataset* tracking = nullptr;
  // Writes per-epoch progress to stderr.
  bool verbose = false;
};

struct TrainResult {
  RunRecord record;
  // "baseline", "ema_acc", "ema_acc_raw", "ema_loss", "ema_loss_raw", "swa".
  // *_raw keep the tracked BN averages; the others have BN recomputed once.
  std::map<std::string, Checkpoint> checkpoints;
  // Validation logits of every checkpoint, same keys.
  std::map<std::string, Tensor2> val_logits;
  std::vector<int> val_labels;
};

TrainResult train_run(const RunConfig& config, std::uint64_t seed, const TrainOptions& options = {});

// Accuracy and mean NLL of an eval-mode model on a dataset.
struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};
EvalResult evaluate(const Mlp& model, const ParamVector& params, const BnStats& bn, const Dataset& data);
EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data);

}  // namespace wavg
