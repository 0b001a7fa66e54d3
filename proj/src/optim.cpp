#include "wavg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "wavg/errors.hpp"

namespace wavg {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kWarmupCosine:
      return "warmup_cosine";
    case ScheduleKind::kStep:
      return "step";
    case ScheduleKind::kConstant:
      return "constant";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "warmup_cosine") return ScheduleKind::kWarmupCosine;
  if (name == "step") return ScheduleKind::kStep;
  if (name == "constant") return ScheduleKind::kConstant;
  throw InputError("unknown schedule kind '" + name + "'");
}

void Schedule::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw InputError("Schedule: base_lr must be positive");
  if (total_epochs == 0) throw InputError("Schedule: total_epochs must be positive");
  if (steps_per_epoch == 0) throw InputError("Schedule: steps_per_epoch must be positive");
  if (warmup_epochs >= total_epochs) throw InputError("Schedule: warmup_epochs must be < total_epochs");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] >= total_epochs) throw InputError("Schedule: milestone beyond total_epochs");
    if (i > 0 && milestones[i] <= milestones[i - 1]) {
      throw InputError("Schedule: milestones must be strictly increasing");
    }
  }
  if (!(step_factor > 0.0)) throw InputError("Schedule: step_factor must be positive");
}

namespace {

double unfrozen_lr(const Schedule& s, std::size_t step) {
  if (s.kind == ScheduleKind::kConstant) return s.base_lr;
  const std::size_t warm = s.warmup_steps();
  if (step < warm) {
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  if (s.kind == ScheduleKind::kStep) {
    const std::size_t epoch = step / s.steps_per_epoch;
    const auto passed = std::count_if(s.milestones.begin(), s.milestones.end(),
                                      [&](std::size_t m) { return epoch >= m; });
    return s.base_lr * std::pow(s.step_factor, static_cast<double>(passed));
  }
  const double span = static_cast<double>(s.total_steps() - warm);
  const double p = static_cast<double>(step - warm) / span;
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace

double lr_at(const Schedule& schedule, std::size_t global_step) {
  if (global_step >= schedule.total_steps()) {
    throw ContractError("lr_at: step " + std::to_string(global_step) + " beyond budget of " +
                        std::to_string(schedule.total_steps()));
  }
  if (schedule.freeze_after_step && global_step > *schedule.freeze_after_step) {
    return unfrozen_lr(schedule, std::min(*schedule.freeze_after_step, schedule.total_steps() - 1));
  }
  return unfrozen_lr(schedule, global_step);
}

SgdState SgdState::for_params(const ParamVector& params, double momentum, double weight_decay,
                              bool nesterov) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InputError("SgdState: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw InputError("SgdState: weight_decay must be non-negative");
  SgdState s;
  s.momentum_buffer.assign(params.size(), 0.0);
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.nesterov = nesterov;
  return s;
}

void SgdState::zero_buffer() { std::fill(momentum_buffer.begin(), momentum_buffer.end(), 0.0); }

void sgd_step(ParamVector& params, const ParamVector& grad, SgdState& state, double lr) {
  params.require_same_layout(grad, "sgd_step");
  if (state.momentum_buffer.size() != params.size()) {
    throw InputError("sgd_step: momentum buffer does not match parameter layout");
  }
  auto p = params.values();
  auto g = grad.values();
  auto& buf = state.momentum_buffer;
  const double mu = state.momentum;
  const double wd = state.weight_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double eff = g[i] + wd * p[i];
    buf[i] = mu * buf[i] + eff;
    p[i] -= state.nesterov ? lr * (eff + mu * buf[i]) : lr * buf[i];
  }
}

void bootstrap_swap(ParamVector& params, const ParamVector& ema_params, SgdState& state,
                    bool keep_momentum) {
  params.require_same_layout(ema_params, "bootstrap_swap");
  std::copy(ema_params.values().begin(), ema_params.values().end(), params.values().begin());
  if (!keep_momentum) state.zero_buffer();
}

}  // namespace wavg
