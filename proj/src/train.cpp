#include "wavg/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

#include "wavg/errors.hpp"
#include "wavg/metrics.hpp"
#include "wavg/seeds.hpp"

namespace wavg {

MlpSpec RunConfig::mlp_spec() const {
  MlpSpec spec;
  spec.layer_widths.push_back(dataset.n_features);
  for (auto w : model.hidden_widths) spec.layer_widths.push_back(w);
  spec.layer_widths.push_back(dataset.n_classes);
  spec.use_batchnorm = model.batchnorm;
  spec.n_classes = dataset.n_classes;
  spec.bn_momentum = model.bn_momentum;
  spec.bn_epsilon = model.bn_epsilon;
  return spec;
}

Schedule RunConfig::make_schedule(std::size_t steps_per_epoch) const {
  Schedule s;
  s.kind = schedule.kind;
  s.base_lr = schedule.base_lr;
  s.warmup_epochs = schedule.warmup_epochs;
  s.total_epochs = epochs;
  s.milestones = schedule.milestones;
  s.step_factor = schedule.step_factor;
  s.steps_per_epoch = steps_per_epoch;
  s.freeze_after_step = schedule.freeze_after_step;
  return s;
}

std::size_t RunConfig::swa_start_epoch() const {
  const auto e = static_cast<std::size_t>(std::ceil(swa.start_fraction * static_cast<double>(epochs)));
  return std::clamp<std::size_t>(e, 1, epochs);
}

void RunConfig::validate() const {
  auto check = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(key, msg);
  };
  try {
    dataset.validate();
  } catch (const InputError& e) {
    throw ConfigError("dataset", e.what());
  }
  check(n_test > 0, "dataset.n_test", "must be positive");
  if (noise) {
    check(noise->rate >= 0.0 && noise->rate <= 1.0, "noise.rate", "must be in [0,1]");
    check(noise->rate == 0.0 || dataset.n_classes >= 2, "noise.rate", "needs at least 2 classes");
  }
  check(train_fraction > 0.0 && train_fraction < 1.0, "split.train_fraction", "must be in (0,1)");
  check(model.batchnorm.size() == model.hidden_widths.size(), "model.batchnorm",
        "need one flag per hidden layer");
  for (auto w : model.hidden_widths) check(w > 0, "model.hidden_widths", "widths must be positive");
  check(model.bn_momentum >= 0.0 && model.bn_momentum <= 1.0, "model.bn_momentum", "must be in [0,1]");
  check(model.bn_epsilon > 0.0, "model.bn_epsilon", "must be positive");
  check(epochs > 0, "train.epochs", "must be positive");
  check(batch_size >= 2, "train.batch_size", "must be at least 2");
  check(schedule.base_lr > 0.0, "schedule.base_lr", "must be positive");
  check(schedule.warmup_epochs < epochs, "schedule.warmup_epochs", "must be smaller than train.epochs");
  for (std::size_t i = 0; i < schedule.milestones.size(); ++i) {
    check(schedule.milestones[i] < epochs, "schedule.milestones", "must be smaller than train.epochs");
    check(i == 0 || schedule.milestones[i] > schedule.milestones[i - 1], "schedule.milestones",
          "must be strictly increasing");
  }
  check(schedule.step_factor > 0.0, "schedule.step_factor", "must be positive");
  check(sgd.momentum >= 0.0 && sgd.momentum < 1.0, "sgd.momentum", "must be in [0,1)");
  check(sgd.weight_decay >= 0.0, "sgd.weight_decay", "must be non-negative");
  check(ema.sampling_period > 0, "ema.sampling_period", "must be positive");
  for (std::size_t i = 0; i < ema.decays.size(); ++i) {
    check(ema.decays[i] >= 0.0 && ema.decays[i] < 1.0, "ema.decays", "must be in [0,1)");
    check(i == 0 || ema.decays[i] > ema.decays[i - 1], "ema.decays", "must be strictly increasing");
  }
  check(swa.start_fraction >= 0.0 && swa.start_fraction <= 1.0, "swa.start_fraction", "must be in [0,1]");
  if (bootstrap.enabled) {
    check(!ema.decays.empty(), "bootstrap.enabled", "needs at least one EMA decay");
    if (bootstrap.decay) {
      check(std::find(ema.decays.begin(), ema.decays.end(), *bootstrap.decay) != ema.decays.end(),
            "bootstrap.decay", "must be one of ema.decays");
    }
  }
}

PreparedData prepare_data(const RunConfig& config) {
  const auto seeds = ResolvedSeedState::resolve(0, config.dataset.seed, config.noise ? config.noise->seed : 0);
  PreparedData out;
  out.pool = synthesize(config.dataset);
  if (config.noise && config.noise->rate > 0.0) {
    NoiseSpec spec = *config.noise;
    spec.seed = seeds.at("noise");
    auto noisy = inject_noise(out.pool.labels, out.pool.n_classes, spec);
    out.pool.labels = std::move(noisy.labels);
    out.pool.noisy_mask = std::move(noisy.noisy_mask);
  }
  out.split = split_train_val(out.pool, seeds.at("split"), config.train_fraction);
  return out;
}

namespace {

constexpr std::size_t kEvalChunk = 4096;

Tensor2 predict_all(const Mlp& model, const ParamVector& params, const BnStats& bn, const Tensor2& x) {
  if (x.rows <= kEvalChunk) return model.predict(params, bn, x);
  Tensor2 out(x.rows, model.spec().n_classes);
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < x.rows; begin += kEvalChunk) {
    const std::size_t end = std::min(begin + kEvalChunk, x.rows);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const Tensor2 part = model.predict(params, bn, take_rows(x, idx));
    std::copy(part.data.begin(), part.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(begin * out.cols));
  }
  return out;
}

EvalResult score(const Tensor2& logits, std::span<const int> labels) {
  EvalResult r;
  if (logits.rows == 0) return r;
  r.loss = softmax_cross_entropy(logits, labels).loss;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    if (static_cast<int>(argmax(logits.row(i))) == labels[i]) ++hits;
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(logits.rows);
  return r;
}

struct CleanNoisy {
  double clean = 0.0;
  std::optional<double> noisy;
};

CleanNoisy train_accuracy(const Tensor2& logits, const Dataset& train) {
  std::size_t clean_n = 0, clean_hit = 0, noisy_n = 0, noisy_hit = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const bool hit = static_cast<int>(argmax(logits.row(i))) == train.labels[i];
    const bool noisy = !train.noisy_mask.empty() && train.noisy_mask[i];
    (noisy ? noisy_n : clean_n) += 1;
    if (hit) (noisy ? noisy_hit : clean_hit) += 1;
  }
  CleanNoisy out;
  out.clean = clean_n ? static_cast<double>(clean_hit) / static_cast<double>(clean_n) : 0.0;
  if (noisy_n) out.noisy = static_cast<double>(noisy_hit) / static_cast<double>(noisy_n);
  return out;
}

struct Snapshot {
  ParamVector params;
  BnStats bn;
  std::size_t update_count = 0;
  std::size_t epoch = 0;
  double decay = 0.0;
};

class Evaluator {
 public:
  Evaluator(const Mlp& model, const RunConfig& config, const PreparedData& data, const TrainOptions& opts)
      : model_(model), config_(config), data_(data), opts_(opts),
        track_train_(config.track_train_accuracy || (config.noise && config.noise->rate > 0.0)) {}

  ModelMetrics measure(const ParamVector& params, const BnStats& bn, bool with_recompute) const {
    ModelMetrics m;
    const auto& val = data_.split.validation;
    const auto v = score(predict_all(model_, params, bn, val.features), val.labels);
    m.val_acc = v.accuracy;
    m.val_loss = v.loss;
    if (with_recompute) {
      const BnStats fresh = recompute_bn(model_, params, data_.split.train.features, config_.batch_size);
      const auto r = score(predict_all(model_, params, fresh, val.features), val.labels);
      m.val_acc_recompute = r.accuracy;
      m.val_loss_recompute = r.loss;
    }
    if (track_train_) {
      const auto& train = data_.split.train;
      const auto cn = train_accuracy(predict_all(model_, params, bn, train.features), train);
      m.train_acc_clean = cn.clean;
      m.train_acc_noisy = cn.noisy;
    }
    if (opts_.tracking) {
      const auto t = score(predict_all(model_, params, bn, opts_.tracking->features), opts_.tracking->labels);
      m.track_acc = t.accuracy;
      m.track_loss = t.loss;
    }
    return m;
  }

 private:
  const Mlp& model_;
  const RunConfig& config_;
  const PreparedData& data_;
  const TrainOptions& opts_;
  bool track_train_;
};

Checkpoint make_checkpoint(const Mlp& model, ParamVector params, BnStats bn,
                           std::map<std::string, std::string> meta) {
  Checkpoint c;
  c.spec = model.spec();
  c.params = std::move(params);
  c.bn = std::move(bn);
  c.metadata = std::move(meta);
  return c;
}

}  // namespace

EvalResult evaluate(const Mlp& model, const ParamVector& params, const BnStats& bn, const Dataset& data) {
  return score(predict_all(model, params, bn, data.features), data.labels);
}

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data) {
  const Mlp model(ckpt.spec);
  return evaluate(model, ckpt.params, ckpt.bn, data);
}

TrainResult train_run(const RunConfig& config, std::uint64_t seed, const TrainOptions& options) {
  config.validate();
  const std::string run_id = options.run_id.empty() ? "seed" + std::to_string(seed) : options.run_id;
  const auto seeds = ResolvedSeedState::resolve(seed, config.dataset.seed, config.noise ? config.noise->seed : 0);
  const PreparedData data = prepare_data(config);
  const Dataset& train = data.split.train;
  const Mlp model(config.mlp_spec());

  std::mt19937_64 init_rng(seeds.at("init"));
  std::mt19937_64 shuffle_rng(seeds.at("shuffle"));
  ParamVector params = model.init_params(init_rng);
  BnStats bn = model.init_bn();
  SgdState sgd = SgdState::for_params(params, config.sgd.momentum, config.sgd.weight_decay, config.sgd.nesterov);

  const auto bounds = batch_bounds(train.size(), config.batch_size);
  const Schedule schedule = config.make_schedule(bounds.size());
  schedule.validate();

  EmaBank bank(config.ema.decays, config.ema.sampling_period, params, bn, config.ema.warmup);
  const std::size_t swa_start = config.swa_start_epoch();
  SwaState swa = SwaState::start(swa_start, params, bn);
  std::size_t bootstrap_index = bank.size() ? bank.size() - 1 : 0;
  if (config.bootstrap.decay) {
    bootstrap_index = static_cast<std::size_t>(
        std::find(config.ema.decays.begin(), config.ema.decays.end(), *config.bootstrap.decay) -
        config.ema.decays.begin());
  }

  const Evaluator eval(model, config, data, options);
  TrainResult result;
  RunRecord& record = result.record;
  record.run_id = run_id;
  record.seed = seed;
  record.decays = config.ema.decays;

  std::optional<Snapshot> best_acc, best_loss;

  auto evaluate_epoch = [&](std::size_t epoch, double lr, double train_loss, std::size_t steps, bool synced) {
    EpochRecord er;
    er.epoch = epoch;
    er.lr = lr;
    er.train_loss = train_loss;
    er.steps = steps;
    er.ema_synced = synced;
    er.baseline = eval.measure(params, bn, false);
    for (std::size_t i = 0; i < bank.size(); ++i) {
      const auto& s = bank.state(i);
      er.ema.push_back(eval.measure(s.averaged_params, s.averaged_bn, config.ema.track_recompute));
    }
    if (config.swa.enabled && swa.count > 0) {
      const auto swa_model = materialize(swa, BnPolicy::kRecomputeOnceFinal, model, train.features, config.batch_size);
      er.swa = eval.measure(swa_model.params, swa_model.bn, false);
    }
    if (epoch > 0) {
      for (std::size_t i = 0; i < bank.size(); ++i) {
        const auto& m = er.ema[i];
        const auto& s = bank.state(i);
        if (!record.best_val_acc || *m.val_acc > record.best_val_acc->value) {
          record.best_val_acc = Verdict{epoch, i, s.decay, *m.val_acc};
          best_acc = Snapshot{s.averaged_params, s.averaged_bn, s.update_count, epoch, s.decay};
        }
        if (!record.lowest_val_loss || *m.val_loss < record.lowest_val_loss->value) {
          record.lowest_val_loss = Verdict{epoch, i, s.decay, *m.val_loss};
          best_loss = Snapshot{s.averaged_params, s.averaged_bn, s.update_count, epoch, s.decay};
        }
      }
    }
    if (options.verbose) {
      std::cerr << run_id << " epoch " << epoch << " lr " << lr << " loss " << train_loss << " val "
                << *er.baseline.val_acc;
      if (!er.ema.empty()) std::cerr << " ema[last] " << *er.ema.back().val_acc;
      std::cerr << '\n';
    }
    record.epochs.push_back(std::move(er));
  };

  evaluate_epoch(0, lr_at(schedule, 0), 0.0, 0, true);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> idx;
  std::vector<int> batch_labels;
  std::size_t steps = 0;
  double lr = 0.0;

  for (std::size_t epoch = 1; epoch <= config.epochs && !record.failed; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    bool synced = false;
    for (const auto& [begin, end] : bounds) {
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
      const Tensor2 x = take_rows(train.features, idx);
      batch_labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = train.labels[idx[i]];

      lr = lr_at(schedule, steps);
      const bool due = bank.due(steps + 1);
      if (due && !config.ema.update_after_step) bank.update(params, bn);
      auto pass = model.forward(params, bn, x, Mode::kTrain);
      const auto lg = softmax_cross_entropy(pass.logits, batch_labels);
      if (!std::isfinite(lg.loss)) {
        record.failed = true;
        record.diagnostic = "non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps);
        break;
      }
      loss_sum += lg.loss * static_cast<double>(idx.size());
      const ParamVector grad = model.backward(params, pass.cache, lg.grad_logits);
      sgd_step(params, grad, sgd, lr);
      ++steps;
      if (due && config.ema.update_after_step) bank.update(params, bn);
      synced = due;
    }
    if (record.failed) break;
    const double norm = params.l2_norm();
    if (!std::isfinite(norm) || norm > 1e8) {
      record.failed = true;
      record.diagnostic = "parameter norm " + format_double(norm) + " after epoch " + std::to_string(epoch);
      break;
    }
    if (config.swa.enabled && epoch >= swa_start) swa_update(swa, params, bn, epoch);
    evaluate_epoch(epoch, lr, loss_sum / static_cast<double>(train.size()), steps, synced);
    // The student is scored on its own iterate, then restarts from the EMA.
    if (config.bootstrap.enabled && !bank.empty() && epoch < config.epochs) {
      const auto& s = bank.state(bootstrap_index);
      bootstrap_swap(params, s.averaged_params, sgd, config.bootstrap.keep_momentum);
      bn = s.averaged_bn;
    }
  }

  // Checkpoints.
  auto add = [&](const std::string& name, Checkpoint ckpt) {
    result.val_logits[name] = predict_all(model, ckpt.params, ckpt.bn, data.split.validation.features);
    result.checkpoints[name] = std::move(ckpt);
  };
  add("baseline", make_checkpoint(model, params, bn,
                                  {{"model", "baseline"}, {"source_run", run_id}, {"epoch", std::to_string(record.epochs.back().epoch)}}));
  auto add_ema = [&](const std::string& name, const Snapshot& snap) {
    std::map<std::string, std::string> meta{{"model", name},
                                            {"source_run", run_id},
                                            {"decay", format_double(snap.decay)},
                                            {"sampling_period", std::to_string(config.ema.sampling_period)},
                                            {"update_count", std::to_string(snap.update_count)},
                                            {"epoch", std::to_string(snap.epoch)}};
    auto raw_meta = meta;
    raw_meta["model"] = name + "_raw";
    raw_meta["bn_policy"] = to_string(BnPolicy::kBatchEma);
    meta["bn_policy"] = to_string(BnPolicy::kRecomputeOnceFinal);
    BnStats fresh = recompute_bn(model, snap.params, train.features, config.batch_size);
    add(name, make_checkpoint(model, snap.params, std::move(fresh), std::move(meta)));
    add(name + "_raw", make_checkpoint(model, snap.params, snap.bn, std::move(raw_meta)));
  };
  if (best_acc) add_ema("ema_acc", *best_acc);
  if (best_loss) add_ema("ema_loss", *best_loss);
  if (config.swa.enabled && swa.count > 0) {
    auto m = materialize(swa, BnPolicy::kRecomputeOnceFinal, model, train.features, config.batch_size);
    add("swa", make_checkpoint(model, std::move(m.params), std::move(m.bn),
                               {{"model", "swa"},
                                {"source_run", run_id},
                                {"update_count", std::to_string(swa.count)},
                                {"start_epoch", std::to_string(swa.start_epoch)},
                                {"bn_policy", to_string(BnPolicy::kRecomputeOnceFinal)}}));
  }
  result.val_labels = data.split.validation.labels;
  return result;
}

}  // namespace wavg
