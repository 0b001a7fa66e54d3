#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wavg/metrics.hpp"
#include "wavg/train.hpp"

namespace wavg {

// Worker count for independent runs, from WAVG_THREADS (default 1).
std::size_t thread_count_from_env();

// One train_run per seed, run ids "seed<k>". Results keep seed order whatever
// the completion order.
std::vector<TrainResult> train_seeds(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                     const TrainOptions& options = {}, std::size_t threads = 1);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for fewer than 2 values
};
MeanStd mean_std(std::span<const double> values);

// ---- memorization under label noise ----

struct MemorizationPoint {
  std::size_t epoch = 0;
  double clean = 0.0;  // train accuracy on samples whose label was kept
  double noisy = 0.0;  // train accuracy (w.r.t. the corrupted label) on flipped samples
};

struct MemorizationCurve {
  std::vector<MemorizationPoint> baseline;
  std::vector<MemorizationPoint> ema;
  std::size_t decay_index = 0;
};

// Throws ContractError when the run had no noisy labels.
MemorizationCurve memorization_curve(const RunRecord& record, std::size_t decay_index);

// Noisy accuracy where the clean series first reaches `clean_target`, linearly
// interpolated between the two bracketing epochs. nullopt if never reached.
std::optional<double> noisy_at_clean(std::span<const MemorizationPoint> series, double clean_target);

// ---- constant learning rate after the stopping epoch ----

struct ConstantLrResult {
  RunRecord cosine;
  RunRecord constant;
  std::size_t freeze_epoch = 0;  // EMA best-acc epoch of the cosine run
  std::size_t freeze_step = 0;   // last step of that epoch
  double freeze_lr = 0.0;
  std::size_t decay_index = 0;   // winning decay of the verdict
};

// Needs config.noise. `tracking` (usually the test set) is evaluated each
// epoch in both branches for the post-freeze curves.
ConstantLrResult constant_lr_ablation(const RunConfig& config, std::uint64_t seed,
                                      const Dataset* tracking = nullptr);

// Tracking accuracy of EMA `decay_index` at `epoch` minus its mean over the
// last `window` epochs. Throws ContractError without tracking metrics.
double post_freeze_drop(const RunRecord& record, std::size_t epoch, std::size_t decay_index,
                        std::size_t window = 5);

// ---- learning-rate sweep ----

struct LrSweepRow {
  double lr = 0.0;
  std::uint64_t seed = 0;
  bool diverged = false;
  std::string diagnostic;
  std::optional<double> baseline_best;  // max over epochs of baseline val acc
  std::optional<double> ema_best;       // best_val_acc verdict value
};

struct LrSweepResult {
  std::vector<LrSweepRow> rows;  // lr-major, then seed
  // Per seed, whether the baseline and EMA share a best lr; exact ties keep
  // every tied lr (diverged runs never win).
  std::map<std::uint64_t, bool> argmax_agreement() const;
};

LrSweepResult lr_sweep(const RunConfig& config, std::span<const double> lrs,
                       std::span<const std::uint64_t> seeds, std::size_t threads = 1);

// ---- linear evaluation of a frozen backbone ----

struct LinearEvalConfig {
  std::size_t epochs = 50;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 128;
};

struct LinearEvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  bool backbone_unchanged = false;
  std::size_t feature_width = 0;
};

// Trains a fresh linear head (no weight decay, no warmup, no averaging) on the
// eval-mode last-hidden-layer features of `backbone` and scores it on
// `target_eval`. Throws InputError on a feature-width mismatch.
LinearEvalResult linear_eval(const Checkpoint& backbone, const Dataset& target_train,
                             const Dataset& target_eval, std::uint64_t seed,
                             const LinearEvalConfig& cfg = {});

// ---- prediction consistency across seeds ----

struct PairStat {
  std::string run_a;
  std::string run_b;
  double churn = 0.0;
  double js = 0.0;
};

struct ConsistencySummary {
  std::vector<PairStat> pairs;
  MeanStd churn;
  MeanStd js;
};

// All unordered pairs of distinct runs. Throws InputError for fewer than 2.
ConsistencySummary pairwise_consistency(std::span<const PredictionSet> runs);

struct ChurnExperiment {
  std::map<std::string, std::vector<PredictionSet>> predictions;  // model -> per seed
  std::map<std::string, ConsistencySummary> summary;              // "baseline", "ema_loss"
};

// Trains one run per seed and compares their checkpoints on `eval_set`.
ChurnExperiment churn_experiment(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                 const Dataset& eval_set, std::size_t threads = 1);
// Same comparison on already trained runs.
ChurnExperiment churn_from_runs(std::span<const TrainResult> runs, const Dataset& eval_set);

// ---- bootstrap ablation ----

struct BootstrapRow {
  std::uint64_t seed = 0;
  double unswapped_val_acc = 0.0;  // final baseline validation accuracy
  double swapped_val_acc = 0.0;
  double unswapped_ema_val_acc = 0.0;  // final bootstrap-decay EMA validation accuracy
  double swapped_ema_val_acc = 0.0;
};

struct BootstrapAblation {
  std::vector<BootstrapRow> rows;
  double bootstrap_decay = 0.0;
  MeanStd unswapped;
  MeanStd swapped;
};

BootstrapAblation bootstrap_ablation(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                     std::size_t threads = 1);

// ---- BN statistics policies ----

struct BnPolicyRow {
  double decay = 0.0;
  BnPolicy policy = BnPolicy::kBatchEma;
  std::vector<double> final_val_acc;  // per seed
  // Max over evaluated epochs; recompute_once_final is evaluated once, at the end.
  std::vector<double> best_val_acc;
  MeanStd final_mean;
  MeanStd best_mean;
};

struct BnPolicyAblation {
  std::vector<BnPolicyRow> rows;  // decay-major, policies in enum order
  std::vector<std::uint64_t> seeds;
  // Per decay: per-epoch validation accuracy averaged over seeds, under
  // batch_ema and with BN recomputed each epoch (index = epoch).
  std::vector<std::vector<double>> mean_batch_ema;
  std::vector<std::vector<double>> mean_recompute;
  std::size_t warmup_epochs = 0;

  // Fraction of epochs after warmup where the seed-mean recompute curve is
  // >= the batch_ema curve, for bank entry `decay_index`.
  double recompute_win_fraction(std::size_t decay_index) const;
};

// Runs with ema.track_recompute forced on. recompute_once_final is the
// final-epoch average with BN recomputed once on the train split.
BnPolicyAblation bn_policy_ablation(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                    std::size_t threads = 1);

}  // namespace wavg
