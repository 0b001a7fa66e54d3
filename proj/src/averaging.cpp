#include "wavg/averaging.hpp"

#include <algorithm>
#include <cmath>

#include "wavg/errors.hpp"

namespace wavg {

double effective_decay(double alpha, std::size_t from_period, std::size_t to_period) {
  if (from_period == 0 || to_period == 0) throw InputError("effective_decay: periods must be positive");
  if (from_period == to_period) return alpha;
  return std::pow(alpha, static_cast<double>(to_period) / static_cast<double>(from_period));
}

double warmup_decay(double alpha, std::size_t update_count) {
  const double t = static_cast<double>(update_count);
  return std::min(alpha, (t + 1.0) / (t + 10.0));
}

EmaState EmaState::start(double decay, std::size_t sampling_period, const ParamVector& params,
                         const BnStats& bn, bool warmup_enabled) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw InputError("EmaState: decay must be in [0,1]");
  if (sampling_period == 0) throw InputError("EmaState: sampling period must be positive");
  EmaState s;
  s.decay = decay;
  s.sampling_period = sampling_period;
  s.averaged_params = params;
  s.averaged_bn = bn;
  s.warmup_enabled = warmup_enabled;
  return s;
}

double EmaState::next_decay() const {
  return warmup_enabled ? warmup_decay(decay, update_count) : decay;
}

namespace {

void blend(std::span<double> avg, std::span<const double> cur, double a) {
  const double b = 1.0 - a;
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = a * avg[i] + b * cur[i];
}

}  // namespace

void ema_update(EmaState& state, const ParamVector& current_params, const BnStats& current_bn) {
  state.averaged_params.require_same_layout(current_params, "ema_update");
  state.averaged_bn.require_same_shape(current_bn, "ema_update");
  const double a = state.next_decay();
  blend(state.averaged_params.values(), current_params.values(), a);
  for (std::size_t k = 0; k < current_bn.layers.size(); ++k) {
    blend(state.averaged_bn.layers[k].running_mean, current_bn.layers[k].running_mean, a);
    blend(state.averaged_bn.layers[k].running_var, current_bn.layers[k].running_var, a);
  }
  ++state.update_count;
}

EmaBank::EmaBank(std::vector<double> decays, std::size_t sampling_period, const ParamVector& params,
                 const BnStats& bn, bool warmup_enabled)
    : decays_(std::move(decays)), sampling_period_(sampling_period) {
  if (sampling_period_ == 0) throw InputError("EmaBank: sampling period must be positive");
  for (std::size_t i = 0; i < decays_.size(); ++i) {
    if (!(decays_[i] >= 0.0 && decays_[i] < 1.0)) throw InputError("EmaBank: decays must be in [0,1)");
    if (i > 0 && !(decays_[i] > decays_[i - 1])) {
      throw InputError("EmaBank: decays must be strictly increasing");
    }
  }
  states_.reserve(decays_.size());
  for (double d : decays_) states_.push_back(EmaState::start(d, sampling_period_, params, bn, warmup_enabled));
}

void EmaBank::update(const ParamVector& params, const BnStats& bn) {
  for (auto& s : states_) ema_update(s, params, bn);
}

SwaState SwaState::start(std::size_t start_epoch, const ParamVector& like, const BnStats& bn_like) {
  SwaState s;
  s.start_epoch = start_epoch;
  s.mean_params = ParamVector(like.layout_ptr());
  s.mean_bn = bn_like;
  for (auto& layer : s.mean_bn.layers) {
    std::fill(layer.running_mean.begin(), layer.running_mean.end(), 0.0);
    std::fill(layer.running_var.begin(), layer.running_var.end(), 0.0);
  }
  return s;
}

namespace {

void absorb(std::span<double> mean, std::span<const double> x, double n) {
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (x[i] - mean[i]) / (n + 1.0);
}

}  // namespace

void swa_update(SwaState& state, const ParamVector& checkpoint, const BnStats& bn, std::size_t epoch) {
  if (epoch < state.start_epoch) {
    throw ContractError("swa_update: epoch " + std::to_string(epoch) + " precedes SWA start epoch " +
                        std::to_string(state.start_epoch));
  }
  state.mean_params.require_same_layout(checkpoint, "swa_update");
  state.mean_bn.require_same_shape(bn, "swa_update");
  const double n = static_cast<double>(state.count);
  absorb(state.mean_params.values(), checkpoint.values(), n);
  for (std::size_t k = 0; k < bn.layers.size(); ++k) {
    absorb(state.mean_bn.layers[k].running_mean, bn.layers[k].running_mean, n);
    absorb(state.mean_bn.layers[k].running_var, bn.layers[k].running_var, n);
  }
  ++state.count;
}

std::string to_string(BnPolicy policy) {
  switch (policy) {
    case BnPolicy::kBatchEma:
      return "batch_ema";
    case BnPolicy::kRecomputeEachEpoch:
      return "recompute_each_epoch";
    case BnPolicy::kRecomputeOnceFinal:
      return "recompute_once_final";
  }
  return "unknown";
}

BnPolicy parse_bn_policy(const std::string& name) {
  if (name == "batch_ema") return BnPolicy::kBatchEma;
  if (name == "recompute_each_epoch") return BnPolicy::kRecomputeEachEpoch;
  if (name == "recompute_once_final") return BnPolicy::kRecomputeOnceFinal;
  throw InputError("unknown BN policy '" + name + "'");
}

BnStats recompute_bn(const Mlp& model, const ParamVector& params, const Tensor2& data,
                     std::size_t batch_size) {
  BnStats fresh = model.init_bn();
  if (fresh.empty()) return fresh;
  if (data.rows == 0) throw InputError("recompute_bn: empty dataset");
  if (batch_size < 2) throw InputError("recompute_bn: batch size must be at least 2");
  if (data.rows < 2) throw InputError("recompute_bn: dataset needs at least 2 rows");

  struct Moments {
    std::vector<double> mean;
    std::vector<double> m2;
  };
  std::vector<Moments> acc(fresh.layers.size());
  for (std::size_t k = 0; k < fresh.layers.size(); ++k) {
    acc[k].mean.assign(fresh.layers[k].running_mean.size(), 0.0);
    acc[k].m2.assign(fresh.layers[k].running_mean.size(), 0.0);
  }
  double seen = 0.0;

  std::vector<std::size_t> idx;
  BatchMoments moments;
  for (std::size_t begin = 0; begin < data.rows;) {
    std::size_t end = std::min(begin + batch_size, data.rows);
    if (data.rows - end == 1) end = data.rows;
    idx.resize(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    const Tensor2 batch = take_rows(data, idx);
    BnStats scratch = fresh;
    (void)model.forward(params, scratch, batch, Mode::kTrain, &moments);

    const double nb = static_cast<double>(batch.rows);
    const double total = seen + nb;
    for (std::size_t k = 0; k < acc.size(); ++k) {
      for (std::size_t c = 0; c < acc[k].mean.size(); ++c) {
        const double delta = moments.mean[k][c] - acc[k].mean[c];
        acc[k].mean[c] += delta * nb / total;
        acc[k].m2[c] += moments.var[k][c] * nb + delta * delta * seen * nb / total;
      }
    }
    seen = total;
    begin = end;
  }

  for (std::size_t k = 0; k < acc.size(); ++k) {
    fresh.layers[k].running_mean = acc[k].mean;
    for (std::size_t c = 0; c < acc[k].m2.size(); ++c) {
      fresh.layers[k].running_var[c] = std::max(0.0, acc[k].m2[c] / seen);
    }
  }
  return fresh;
}

EvaluableModel materialize(const EmaState& ema, BnPolicy policy, const Mlp& model,
                           const Tensor2& train, std::size_t batch_size) {
  if (ema.update_count == 0) throw ContractError("materialize: EMA has absorbed no updates");
  EvaluableModel out{ema.averaged_params, ema.averaged_bn};
  if (policy != BnPolicy::kBatchEma) out.bn = recompute_bn(model, out.params, train, batch_size);
  return out;
}

EvaluableModel materialize(const SwaState& swa, BnPolicy policy, const Mlp& model,
                           const Tensor2& train, std::size_t batch_size) {
  if (swa.count == 0) throw ContractError("materialize: SWA has absorbed no checkpoints");
  EvaluableModel out{swa.mean_params, swa.mean_bn};
  if (policy != BnPolicy::kBatchEma) out.bn = recompute_bn(model, out.params, train, batch_size);
  return out;
}

}  // namespace wavg
