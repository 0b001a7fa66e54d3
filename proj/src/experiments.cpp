#include "wavg/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "wavg/errors.hpp"
#include "wavg/seeds.hpp"

namespace wavg {

std::size_t thread_count_from_env() {
  const char* v = std::getenv("WAVG_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) throw ConfigError("WAVG_THREADS", "must be a positive integer");
  return static_cast<std::size_t>(n);
}

namespace {

// Runs task(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure after all workers stop.
template <typename Task>
void parallel_for(std::size_t n, std::size_t threads, Task&& task) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string seed_run_id(std::uint64_t seed) { return "seed" + std::to_string(seed); }

}  // namespace

std::vector<TrainResult> train_seeds(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                     const TrainOptions& options, std::size_t threads) {
  std::vector<TrainResult> out(seeds.size());
  parallel_for(seeds.size(), threads, [&](std::size_t i) {
    TrainOptions o = options;
    o.run_id = seed_run_id(seeds[i]);
    out[i] = train_run(config, seeds[i], o);
  });
  return out;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return r;
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return r;
}

MemorizationCurve memorization_curve(const RunRecord& record, std::size_t decay_index) {
  MemorizationCurve c;
  c.decay_index = decay_index;
  auto point = [](std::size_t epoch, const ModelMetrics& m) {
    if (!m.train_acc_clean || !m.train_acc_noisy) {
      throw ContractError("memorization_curve: run has no noisy-label train accuracy");
    }
    return MemorizationPoint{epoch, *m.train_acc_clean, *m.train_acc_noisy};
  };
  if (record.epochs.empty()) throw ContractError("memorization_curve: empty record");
  for (const auto& e : record.epochs) {
    if (decay_index >= e.ema.size()) throw InputError("memorization_curve: decay index out of range");
    c.baseline.push_back(point(e.epoch, e.baseline));
    c.ema.push_back(point(e.epoch, e.ema[decay_index]));
  }
  return c;
}

std::optional<double> noisy_at_clean(std::span<const MemorizationPoint> series, double clean_target) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i].clean < clean_target) continue;
    if (i == 0) return series[0].noisy;
    const auto& a = series[i - 1];
    const auto& b = series[i];
    const double w = (clean_target - a.clean) / (b.clean - a.clean);
    return a.noisy + w * (b.noisy - a.noisy);
  }
  return std::nullopt;
}

ConstantLrResult constant_lr_ablation(const RunConfig& config, std::uint64_t seed, const Dataset* tracking) {
  if (!config.noise || config.noise->rate <= 0.0) {
    throw ConfigError("noise.rate", "constant_lr ablation needs label noise");
  }
  if (config.ema.decays.empty()) throw ConfigError("ema.decays", "constant_lr ablation needs an EMA bank");
  TrainOptions opts;
  opts.tracking = tracking;
  opts.run_id = seed_run_id(seed) + "_cosine";
  ConstantLrResult r;
  r.cosine = train_run(config, seed, opts).record;
  if (r.cosine.failed || !r.cosine.best_val_acc) {
    throw ContractError("constant_lr_ablation: cosine run failed: " + r.cosine.diagnostic);
  }
  const Verdict& v = *r.cosine.best_val_acc;
  r.freeze_epoch = v.epoch;
  r.decay_index = v.decay_index;
  r.freeze_step = r.cosine.epochs[v.epoch].steps - 1;
  r.freeze_lr = r.cosine.epochs[v.epoch].lr;

  RunConfig frozen = config;
  frozen.schedule.freeze_after_step = r.freeze_step;
  opts.run_id = seed_run_id(seed) + "_constant";
  r.constant = train_run(frozen, seed, opts).record;
  return r;
}

double post_freeze_drop(const RunRecord& record, std::size_t epoch, std::size_t decay_index, std::size_t window) {
  if (epoch >= record.epochs.size() || window == 0) throw InputError("post_freeze_drop: epoch out of range");
  auto acc = [&](const EpochRecord& e) {
    if (decay_index >= e.ema.size() || !e.ema[decay_index].track_acc) {
      throw ContractError("post_freeze_drop: record has no tracking accuracy");
    }
    return *e.ema[decay_index].track_acc;
  };
  const std::size_t n = std::min(window, record.epochs.size());
  double tail = 0.0;
  for (std::size_t i = record.epochs.size() - n; i < record.epochs.size(); ++i) tail += acc(record.epochs[i]);
  return acc(record.epochs[epoch]) - tail / static_cast<double>(n);
}

std::map<std::uint64_t, bool> LrSweepResult::argmax_agreement() const {
  struct Best {
    double base = -1.0, ema = -1.0;
    std::vector<double> base_lrs, ema_lrs;
  };
  const auto offer = [](double v, double lr, double& best, std::vector<double>& lrs) {
    if (v > best) {
      best = v;
      lrs = {lr};
    } else if (v == best) {
      lrs.push_back(lr);
    }
  };
  std::map<std::uint64_t, Best> best;
  for (const auto& row : rows) {
    auto& b = best[row.seed];
    if (row.diverged) continue;
    if (row.baseline_best) offer(*row.baseline_best, row.lr, b.base, b.base_lrs);
    if (row.ema_best) offer(*row.ema_best, row.lr, b.ema, b.ema_lrs);
  }
  // Tied maxima count as agreement when the tie sets share an lr.
  std::map<std::uint64_t, bool> out;
  for (const auto& [seed, b] : best) {
    bool shared = false;
    for (double lr : b.base_lrs) shared |= std::find(b.ema_lrs.begin(), b.ema_lrs.end(), lr) != b.ema_lrs.end();
    out[seed] = shared;
  }
  return out;
}

LrSweepResult lr_sweep(const RunConfig& config, std::span<const double> lrs, std::span<const std::uint64_t> seeds,
                       std::size_t threads) {
  if (lrs.empty()) throw InputError("lr_sweep: need at least one learning rate");
  if (seeds.empty()) throw InputError("lr_sweep: need at least one seed");
  LrSweepResult result;
  result.rows.resize(lrs.size() * seeds.size());
  parallel_for(result.rows.size(), threads, [&](std::size_t i) {
    RunConfig c = config;
    c.schedule.base_lr = lrs[i / seeds.size()];
    const std::uint64_t seed = seeds[i % seeds.size()];
    TrainOptions o;
    o.run_id = seed_run_id(seed) + "_lr" + format_double(c.schedule.base_lr);
    const RunRecord rec = train_run(c, seed, o).record;
    LrSweepRow row;
    row.lr = c.schedule.base_lr;
    row.seed = seed;
    row.diverged = rec.failed;
    row.diagnostic = rec.diagnostic;
    if (!rec.failed) {
      for (const auto& e : rec.epochs) {
        if (e.epoch == 0) continue;
        row.baseline_best = std::max(row.baseline_best.value_or(0.0), *e.baseline.val_acc);
      }
      if (rec.best_val_acc) row.ema_best = rec.best_val_acc->value;
    }
    result.rows[i] = std::move(row);
  });
  return result;
}

LinearEvalResult linear_eval(const Checkpoint& backbone, const Dataset& target_train, const Dataset& target_eval,
                             std::uint64_t seed, const LinearEvalConfig& cfg) {
  const Mlp net(backbone.spec);
  const auto& widths = backbone.spec.layer_widths;
  if (widths.size() < 3) throw InputError("linear_eval: backbone has no hidden layer");
  if (target_train.features.cols != widths.front() || target_eval.features.cols != widths.front()) {
    throw InputError("linear_eval: target features have width " + std::to_string(target_train.features.cols) +
                     ", backbone expects " + std::to_string(widths.front()));
  }
  if (target_train.size() < 2) throw InputError("linear_eval: need at least 2 target samples");
  const std::size_t n_classes = std::max(target_train.n_classes, target_eval.n_classes);

  const ParamVector frozen_params = backbone.params;
  const BnStats frozen_bn = backbone.bn;
  const Tensor2 train_feats = net.features(backbone.params, backbone.bn, target_train.features);
  const Tensor2 eval_feats = net.features(backbone.params, backbone.bn, target_eval.features);

  MlpSpec head_spec;
  head_spec.layer_widths = {train_feats.cols, n_classes};
  head_spec.n_classes = n_classes;
  const Mlp head(head_spec);
  std::mt19937_64 init_rng(derive_seed(seed, "head_init"));
  std::mt19937_64 shuffle_rng(derive_seed(seed, "head_shuffle"));
  ParamVector w = head.init_params(init_rng);
  BnStats no_bn = head.init_bn();
  SgdState sgd = SgdState::for_params(w, cfg.momentum, 0.0, true);

  std::vector<std::size_t> order(target_train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bounds = batch_bounds(order.size(), cfg.batch_size);
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (const auto& [begin, end] : bounds) {
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
      labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = target_train.labels[idx[i]];
      auto pass = head.forward(w, no_bn, take_rows(train_feats, idx), Mode::kTrain);
      const auto lg = softmax_cross_entropy(pass.logits, labels);
      sgd_step(w, head.backward(w, pass.cache, lg.grad_logits), sgd, cfg.lr);
    }
  }

  LinearEvalResult r;
  const Tensor2 logits = head.predict(w, no_bn, eval_feats);
  const auto preds = PredictionSet::from_logits(logits, target_eval.labels);
  const auto an = accuracy_nll(preds);
  r.accuracy = an.accuracy;
  r.loss = an.nll;
  r.feature_width = train_feats.cols;
  r.backbone_unchanged = frozen_params == backbone.params && frozen_bn == backbone.bn;
  return r;
}

ConsistencySummary pairwise_consistency(std::span<const PredictionSet> runs) {
  if (runs.size() < 2) throw InputError("pairwise_consistency: need at least 2 runs");
  ConsistencySummary s;
  std::vector<double> churns, jss;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      PairStat p{runs[i].run_id, runs[j].run_id, churn(runs[i], runs[j]), js_divergence(runs[i], runs[j])};
      churns.push_back(p.churn);
      jss.push_back(p.js);
      s.pairs.push_back(std::move(p));
    }
  }
  s.churn = mean_std(churns);
  s.js = mean_std(jss);
  return s;
}

ChurnExperiment churn_from_runs(std::span<const TrainResult> runs, const Dataset& eval_set) {
  if (runs.size() < 2) throw InputError("churn_experiment: need at least 2 runs");
  ChurnExperiment out;
  for (const std::string model : {"baseline", "ema_loss"}) {
    auto& preds = out.predictions[model];
    for (const auto& run : runs) {
      const auto it = run.checkpoints.find(model);
      if (it == run.checkpoints.end()) {
        throw ContractError("churn_experiment: run " + run.record.run_id + " has no " + model + " checkpoint");
      }
      const Mlp net(it->second.spec);
      preds.push_back(PredictionSet::from_logits(net.predict(it->second.params, it->second.bn, eval_set.features),
                                                 eval_set.labels, run.record.run_id));
    }
    out.summary[model] = pairwise_consistency(preds);
  }
  return out;
}

ChurnExperiment churn_experiment(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                 const Dataset& eval_set, std::size_t threads) {
  if (seeds.size() < 2) throw InputError("churn_experiment: need at least 2 seeds");
  const auto runs = train_seeds(config, seeds, {}, threads);
  return churn_from_runs(runs, eval_set);
}

BootstrapAblation bootstrap_ablation(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                     std::size_t threads) {
  if (config.ema.decays.empty()) throw ConfigError("ema.decays", "bootstrap ablation needs an EMA bank");
  if (seeds.empty()) throw InputError("bootstrap_ablation: need at least one seed");
  RunConfig plain = config;
  plain.bootstrap.enabled = false;
  RunConfig swapped = config;
  swapped.bootstrap.enabled = true;
  swapped.validate();
  const double decay = config.bootstrap.decay.value_or(config.ema.decays.back());
  const auto index = static_cast<std::size_t>(
      std::find(config.ema.decays.begin(), config.ema.decays.end(), decay) - config.ema.decays.begin());

  BootstrapAblation out;
  out.bootstrap_decay = decay;
  out.rows.resize(seeds.size());
  parallel_for(2 * seeds.size(), threads, [&](std::size_t i) {
    const std::size_t s = i / 2;
    const bool swap = i % 2 == 1;
    TrainOptions o;
    o.run_id = seed_run_id(seeds[s]) + (swap ? "_bootstrap" : "_plain");
    const RunRecord rec = train_run(swap ? swapped : plain, seeds[s], o).record;
    if (rec.failed) throw ContractError("bootstrap_ablation: run " + o.run_id + " failed: " + rec.diagnostic);
    const auto& last = rec.epochs.back();
    auto& row = out.rows[s];
    row.seed = seeds[s];
    (swap ? row.swapped_val_acc : row.unswapped_val_acc) = *last.baseline.val_acc;
    (swap ? row.swapped_ema_val_acc : row.unswapped_ema_val_acc) = *last.ema[index].val_acc;
  });
  std::vector<double> a, b;
  for (const auto& row : out.rows) {
    a.push_back(row.unswapped_val_acc);
    b.push_back(row.swapped_val_acc);
  }
  out.unswapped = mean_std(a);
  out.swapped = mean_std(b);
  return out;
}

double BnPolicyAblation::recompute_win_fraction(std::size_t decay_index) const {
  if (decay_index >= mean_batch_ema.size()) throw InputError("recompute_win_fraction: decay index out of range");
  const auto& a = mean_batch_ema[decay_index];
  const auto& r = mean_recompute[decay_index];
  std::size_t wins = 0, total = 0;
  for (std::size_t e = warmup_epochs + 1; e < a.size(); ++e) {
    ++total;
    if (r[e] >= a[e]) ++wins;
  }
  return total ? static_cast<double>(wins) / static_cast<double>(total) : 0.0;
}

BnPolicyAblation bn_policy_ablation(const RunConfig& config, std::span<const std::uint64_t> seeds,
                                    std::size_t threads) {
  if (config.ema.decays.empty()) throw ConfigError("ema.decays", "bn_policy ablation needs an EMA bank");
  if (seeds.empty()) throw InputError("bn_policy_ablation: need at least one seed");
  RunConfig c = config;
  c.ema.track_recompute = true;
  const auto runs = train_seeds(c, seeds, {}, threads);
  for (const auto& run : runs) {
    if (run.record.failed) throw ContractError("bn_policy_ablation: run failed: " + run.record.diagnostic);
  }

  BnPolicyAblation out;
  out.seeds.assign(seeds.begin(), seeds.end());
  out.warmup_epochs = config.schedule.warmup_epochs;
  const std::size_t n_decays = c.ema.decays.size();
  const std::size_t n_epochs = runs.front().record.epochs.size();
  const double n_seeds = static_cast<double>(runs.size());
  out.mean_batch_ema.assign(n_decays, std::vector<double>(n_epochs, 0.0));
  out.mean_recompute.assign(n_decays, std::vector<double>(n_epochs, 0.0));
  for (const auto& run : runs) {
    for (std::size_t e = 0; e < n_epochs; ++e) {
      for (std::size_t d = 0; d < n_decays; ++d) {
        const auto& m = run.record.epochs[e].ema[d];
        out.mean_batch_ema[d][e] += *m.val_acc / n_seeds;
        out.mean_recompute[d][e] += *m.val_acc_recompute / n_seeds;
      }
    }
  }

  for (std::size_t d = 0; d < n_decays; ++d) {
    for (BnPolicy policy : {BnPolicy::kBatchEma, BnPolicy::kRecomputeEachEpoch, BnPolicy::kRecomputeOnceFinal}) {
      BnPolicyRow row;
      row.decay = c.ema.decays[d];
      row.policy = policy;
      for (const auto& run : runs) {
        const auto& epochs = run.record.epochs;
        auto value = [&](const EpochRecord& e) {
          const auto& m = e.ema[d];
          return policy == BnPolicy::kBatchEma ? *m.val_acc : *m.val_acc_recompute;
        };
        row.final_val_acc.push_back(value(epochs.back()));
        if (policy == BnPolicy::kRecomputeOnceFinal) {
          row.best_val_acc.push_back(value(epochs.back()));
        } else {
          double best = 0.0;
          for (std::size_t e = 1; e < epochs.size(); ++e) best = std::max(best, value(epochs[e]));
          row.best_val_acc.push_back(best);
        }
      }
      row.final_mean = mean_std(row.final_val_acc);
      row.best_mean = mean_std(row.best_val_acc);
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace wavg
