#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "wavg/model.hpp"

namespace wavg {

enum class ScheduleKind { kWarmupCosine, kStep, kConstant };

std::string to_string(ScheduleKind kind);
// Accepts "warmup_cosine" | "step" | "constant".
ScheduleKind parse_schedule_kind(const std::string& name);

// Per-step learning-rate policy.
//  - warmup_cosine: linear ramp from base_lr / warmup_steps to base_lr, then
//    base_lr * (1 + cos(pi * p)) / 2 with p the elapsed post-warmup fraction.
//  - step: same warmup, then base_lr * step_factor^(milestones reached), where
//    a milestone counts once the current epoch is >= that milestone.
//  - constant: base_lr everywhere (warmup ignored).
// `freeze_after_step` holds the rate at lr_at(freeze) for every later step.
struct Schedule {
  ScheduleKind kind = ScheduleKind::kWarmupCosine;
  double base_lr = 0.1;
  std::size_t warmup_epochs = 0;
  std::size_t total_epochs = 1;
  std::vector<std::size_t> milestones;
  double step_factor = 0.2;
  std::size_t steps_per_epoch = 1;
  std::optional<std::size_t> freeze_after_step;

  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  // Throws InputError on a malformed schedule.
  void validate() const;
};

// Throws ContractError when global_step >= total_steps().
double lr_at(const Schedule& schedule, std::size_t global_step);

struct SgdState {
  std::vector<double> momentum_buffer;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool nesterov = true;

  static SgdState for_params(const ParamVector& params, double momentum, double weight_decay,
                             bool nesterov = true);
  void zero_buffer();
};

// g = grad + weight_decay * params; buf = momentum * buf + g;
// Nesterov: params -= lr * (g + momentum * buf), else params -= lr * buf.
void sgd_step(ParamVector& params, const ParamVector& grad, SgdState& state, double lr);

// Replaces the training iterate with `ema_params`. The momentum buffer is
// zeroed unless `keep_momentum`.
void bootstrap_swap(ParamVector& params, const ParamVector& ema_params, SgdState& state,
                    bool keep_momentum = false);

}  // namespace wavg
