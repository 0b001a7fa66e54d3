#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "wavg/model.hpp"

namespace wavg {

// Decay that keeps the same forgetting horizon when the sampling period
// changes from `from_period` to `to_period` steps: alpha^(to/from).
// effective_decay(0.984, 16, 1) ~= 0.999; effective_decay(0.999875, 1, 16) ~= 0.998.
double effective_decay(double alpha, std::size_t from_period, std::size_t to_period);

// min(alpha, (t + 1) / (t + 10)) for the t-th update (0-based).
double warmup_decay(double alpha, std::size_t update_count);

struct EmaState {
  double decay = 0.0;
  std::size_t sampling_period = 1;
  std::size_t update_count = 0;
  ParamVector averaged_params;
  BnStats averaged_bn;
  bool warmup_enabled = true;

  // Starts the average at the initial iterate.
  static EmaState start(double decay, std::size_t sampling_period, const ParamVector& params,
                        const BnStats& bn, bool warmup_enabled);
  // Decay that the next update will use.
  double next_decay() const;
};

// avg = a_t * avg + (1 - a_t) * current for parameters and BN statistics alike,
// with a_t = next_decay(). The caller decides the cadence.
void ema_update(EmaState& state, const ParamVector& current_params, const BnStats& current_bn);

// K averages with a shared sampling period over one source trajectory.
class EmaBank {
 public:
  EmaBank() = default;
  // `decays` must be strictly increasing in [0, 1).
  EmaBank(std::vector<double> decays, std::size_t sampling_period, const ParamVector& params,
          const BnStats& bn, bool warmup_enabled);

  std::size_t sampling_period() const { return sampling_period_; }
  const std::vector<double>& decays() const { return decays_; }
  std::size_t size() const { return states_.size(); }
  bool empty() const { return states_.empty(); }
  const EmaState& state(std::size_t i) const { return states_[i]; }
  const std::vector<EmaState>& states() const { return states_; }

  // True when `steps_taken` optimizer steps have elapsed since the last update.
  bool due(std::size_t steps_taken) const { return steps_taken % sampling_period_ == 0; }
  void update(const ParamVector& params, const BnStats& bn);

 private:
  std::vector<double> decays_;
  std::size_t sampling_period_ = 1;
  std::vector<EmaState> states_;
};

// Uniform running mean of checkpoints (and of their BN statistics).
struct SwaState {
  std::size_t count = 0;
  std::size_t start_epoch = 0;
  ParamVector mean_params;
  BnStats mean_bn;

  static SwaState start(std::size_t start_epoch, const ParamVector& like, const BnStats& bn_like);
};

// mean += (x - mean) / (n + 1). Throws ContractError when `epoch` precedes
// start_epoch.
void swa_update(SwaState& state, const ParamVector& checkpoint, const BnStats& bn,
                std::size_t epoch);

enum class BnPolicy { kBatchEma, kRecomputeEachEpoch, kRecomputeOnceFinal };

std::string to_string(BnPolicy policy);
BnPolicy parse_bn_policy(const std::string& name);

// Fresh BN statistics for `params` from one gradient-free train-mode pass over
// `data` in contiguous batches of `batch_size`. Statistics are the exact
// pooled moments of each BN layer's inputs across all batches (streaming mean
// and M2 merge), not momentum averages. A trailing batch of one row is folded
// into the previous batch. For the first BN layer this equals the whole-dataset
// moments; deeper layers see inputs normalized by per-batch statistics.
BnStats recompute_bn(const Mlp& model, const ParamVector& params, const Tensor2& data,
                     std::size_t batch_size);

struct EvaluableModel {
  ParamVector params;
  BnStats bn;
};

// Averaged parameters paired with BN statistics per `policy`: batch_ema keeps
// the tracked average, the recompute policies call recompute_bn on `train`.
EvaluableModel materialize(const EmaState& ema, BnPolicy policy, const Mlp& model,
                           const Tensor2& train, std::size_t batch_size);
EvaluableModel materialize(const SwaState& swa, BnPolicy policy, const Mlp& model,
                           const Tensor2& train, std::size_t batch_size);

}  // namespace wavg
