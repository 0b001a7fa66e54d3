#include "wavg/commands.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "wavg/errors.hpp"
#include "wavg/experiments.hpp"
#include "wavg/metrics.hpp"
#include "wavg/record_io.hpp"

namespace wavg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kModels = {"baseline", "ema_acc", "ema_acc_raw", "ema_loss", "ema_loss_raw", "swa"};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) { return format_double(v); }

std::string fmt(const std::optional<double>& v) { return v ? format_double(*v) : "nan"; }

void write_config(const CommandContext& ctx) {
  fs::create_directories(ctx.experiment_dir());
  write_text(ctx.experiment_dir() / "config.json", to_json(ctx.config).dump(2) + "\n");
}

TrainOptions options_for(const CommandContext& ctx) {
  TrainOptions opts;
  opts.verbose = ctx.verbose;
  return opts;
}

// Mean and sample std rows appended to a CSV whose first column is a label.
void append_mean_std(std::ostringstream& csv, const std::vector<std::vector<double>>& columns,
                     const std::string& prefix = {}) {
  std::vector<MeanStd> stats;
  for (const auto& c : columns) stats.push_back(mean_std(c));
  csv << prefix << "mean";
  for (const auto& s : stats) csv << ',' << fmt(s.mean);
  csv << '\n' << prefix << "std";
  for (const auto& s : stats) csv << ',' << fmt(s.stddev);
  csv << '\n';
}

std::optional<std::uint64_t> seed_of_dir(const fs::path& dir) {
  const std::string name = dir.filename().string();
  if (name.size() <= 4 || name.rfind("seed", 0) != 0) return std::nullopt;
  const std::string digits = name.substr(4);
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
  return std::stoull(digits);
}

void write_run(const fs::path& dir, const TrainResult& result) {
  fs::create_directories(dir);
  write_record(dir / "record.jsonl", result.record);
  for (const auto& [name, ckpt] : result.checkpoints) {
    save_checkpoint(dir / ("ckpt_" + name + ".bin"), ckpt);
    write_predictions(dir / ("preds_val_" + name + ".csv"), result.val_logits.at(name), result.val_labels);
  }
}

void print_summary(std::ostream& log, const TrainResult& result) {
  const auto& r = result.record;
  if (r.failed) log << r.run_id << " FAILED: " << r.diagnostic << '\n';
  for (const auto& name : kModels) {
    const auto it = result.val_logits.find(name);
    if (it == result.val_logits.end()) continue;
    const auto preds = PredictionSet::from_logits(it->second, result.val_labels);
    const auto an = accuracy_nll(preds);
    log << r.run_id << ' ' << name << " val_acc " << fmt(an.accuracy) << " val_loss " << fmt(an.nll);
    const auto& meta = result.checkpoints.at(name).metadata;
    if (const auto d = meta.find("decay"); d != meta.end()) log << " decay " << d->second;
    if (const auto e = meta.find("epoch"); e != meta.end()) log << " epoch " << e->second;
    if (const auto b = meta.find("bn_policy"); b != meta.end()) log << " bn " << b->second;
    log << '\n';
  }
}

struct LoadedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  RunRecord record;
};

std::vector<LoadedRun> completed_runs(const fs::path& exp_dir, std::ostream& log) {
  std::vector<LoadedRun> runs;
  if (!fs::is_directory(exp_dir)) throw InputError("not a directory: " + exp_dir.string());
  for (const auto& entry : fs::directory_iterator(exp_dir)) {
    if (!entry.is_directory()) continue;
    const auto seed = seed_of_dir(entry.path());
    if (!seed || !fs::exists(entry.path() / "record.jsonl")) continue;
    LoadedRun run{*seed, entry.path(), read_record(entry.path() / "record.jsonl")};
    if (run.record.failed) {
      log << "skipping failed run " << run.record.run_id << ": " << run.record.diagnostic << '\n';
      continue;
    }
    runs.push_back(std::move(run));
  }
  std::sort(runs.begin(), runs.end(), [](const LoadedRun& a, const LoadedRun& b) { return a.seed < b.seed; });
  if (runs.empty()) throw InputError("no completed run under " + exp_dir.string());
  return runs;
}

}  // namespace

int cmd_train(const CommandContext& ctx, std::ostream& log) {
  ctx.config.run.validate();
  write_config(ctx);
  const auto results = train_seeds(ctx.config.run, ctx.config.seeds, options_for(ctx), ctx.threads);
  int status = kExitOk;
  for (const auto& result : results) {
    write_run(ctx.experiment_dir() / result.record.run_id, result);
    print_summary(log, result);
    if (result.record.failed) status = kExitFailure;
  }
  return status;
}

int cmd_report(const fs::path& exp_dir, std::ostream& log) {
  const ExperimentConfig cfg = parse_config(json::parse(read_text(exp_dir / "config.json")));
  const auto runs = completed_runs(exp_dir, log);
  const Dataset test = synthesize_test(cfg.run.dataset, cfg.run.n_test);

  // Models present in every completed run, in canonical order.
  std::vector<std::string> models;
  for (const auto& m : kModels) {
    const bool everywhere = std::all_of(runs.begin(), runs.end(), [&](const LoadedRun& r) {
      return fs::exists(r.dir / ("ckpt_" + m + ".bin")) && fs::exists(r.dir / ("preds_val_" + m + ".csv"));
    });
    if (everywhere) models.push_back(m);
  }
  if (models.empty()) throw InputError("no checkpoint common to all runs under " + exp_dir.string());

  std::map<std::string, std::vector<PredictionSet>> test_preds;
  std::map<std::string, std::vector<PredictionSet>> val_preds;
  for (const auto& run : runs) {
    for (const auto& m : models) {
      const Checkpoint ckpt = load_checkpoint(run.dir / ("ckpt_" + m + ".bin"));
      const Mlp model(ckpt.spec);
      Tensor2 logits = model.predict(ckpt.params, ckpt.bn, test.features);
      write_predictions(run.dir / ("preds_test_" + m + ".csv"), logits, test.labels);
      test_preds[m].push_back(PredictionSet::from_logits(std::move(logits), test.labels, run.record.run_id));
      val_preds[m].push_back(read_predictions(run.dir / ("preds_val_" + m + ".csv"), run.record.run_id));
    }
  }

  std::vector<std::string> run_ids;
  for (const auto& r : runs) run_ids.push_back(r.record.run_id);
  std::ostringstream metrics;
  auto metric = [&](const std::string& name, double value, const std::vector<std::string>& ids) {
    json line = {{"metric", name}, {"value", value}, {"run_ids", ids}, {"config", cfg.experiment}};
    metrics << line.dump() << '\n';
  };

  // Test accuracy and loss, one row per run.
  {
    std::ostringstream csv;
    csv << "run";
    for (const auto& m : models) csv << ',' << m << "_acc," << m << "_loss";
    csv << '\n';
    std::vector<std::vector<double>> columns(2 * models.size());
    for (std::size_t r = 0; r < runs.size(); ++r) {
      csv << run_ids[r];
      for (std::size_t k = 0; k < models.size(); ++k) {
        const auto an = accuracy_nll(test_preds[models[k]][r]);
        columns[2 * k].push_back(an.accuracy);
        columns[2 * k + 1].push_back(an.nll);
        csv << ',' << fmt(an.accuracy) << ',' << fmt(an.nll);
        metric("test_acc/" + models[k], an.accuracy, {run_ids[r]});
        metric("test_loss/" + models[k], an.nll, {run_ids[r]});
      }
      csv << '\n';
    }
    append_mean_std(csv, columns);
    for (std::size_t k = 0; k < models.size(); ++k) {
      metric("mean_test_acc/" + models[k], mean_std(columns[2 * k]).mean, run_ids);
      metric("mean_test_loss/" + models[k], mean_std(columns[2 * k + 1]).mean, run_ids);
    }
    write_text(exp_dir / "summary.csv", csv.str());
  }

  // Calibration, temperature fitted on each run's validation predictions.
  {
    std::ostringstream csv;
    csv << "run,model,ece,ece_ts,temperature,val_nll_t1,val_nll_ts\n";
    for (const auto& m : models) {
      std::vector<std::vector<double>> columns(2);
      for (std::size_t r = 0; r < runs.size(); ++r) {
        const double ece = ece_equal_mass(test_preds[m][r]);
        const auto ts = temperature_scale(val_preds[m][r], test_preds[m][r]);
        columns[0].push_back(ece);
        columns[1].push_back(ts.scaled_ece);
        csv << run_ids[r] << ',' << m << ',' << fmt(ece) << ',' << fmt(ts.scaled_ece) << ','
            << fmt(ts.temperature) << ',' << fmt(ts.holdout_nll_at_one) << ',' << fmt(ts.holdout_nll) << '\n';
        metric("ece/" + m, ece, {run_ids[r]});
        metric("ece_ts/" + m, ts.scaled_ece, {run_ids[r]});
      }
      const auto a = mean_std(columns[0]);
      const auto b = mean_std(columns[1]);
      csv << "mean," << m << ',' << fmt(a.mean) << ',' << fmt(b.mean) << ",,,\n";
      csv << "std," << m << ',' << fmt(a.stddev) << ',' << fmt(b.stddev) << ",,,\n";
    }
    write_text(exp_dir / "calibration.csv", csv.str());
  }

  // Cross-seed consistency.
  {
    std::ostringstream csv;
    if (runs.size() < 2) {
      csv << "model,status\n";
      for (const auto& m : models) csv << m << ",unavailable (needs >= 2 completed runs)\n";
    } else {
      csv << "model,run_a,run_b,churn,js\n";
      for (const auto& m : models) {
        const auto s = pairwise_consistency(test_preds[m]);
        for (const auto& p : s.pairs) {
          csv << m << ',' << p.run_a << ',' << p.run_b << ',' << fmt(p.churn) << ',' << fmt(p.js) << '\n';
        }
        csv << m << ",mean,," << fmt(s.churn.mean) << ',' << fmt(s.js.mean) << '\n';
        csv << m << ",std,," << fmt(s.churn.stddev) << ',' << fmt(s.js.stddev) << '\n';
        metric("mean_churn/" + m, s.churn.mean, run_ids);
        metric("mean_js/" + m, s.js.mean, run_ids);
      }
    }
    write_text(exp_dir / "churn.csv", csv.str());
  }

  write_text(exp_dir / "metrics.jsonl", metrics.str());
  log << "report: " << runs.size() << " run(s), " << models.size() << " model(s) -> " << exp_dir.string() << '\n';
  return kExitOk;
}

int cmd_ablate(const std::string& kind, const CommandContext& ctx, std::ostream& log) {
  const auto& cfg = ctx.config;
  const auto& seeds = cfg.seeds;
  if (kind != "bootstrap" && kind != "constant_lr" && kind != "bn_policy" && kind != "lr_sweep") {
    throw ConfigError("ablate", "unknown kind '" + kind + "' (bootstrap, constant_lr, bn_policy, lr_sweep)");
  }
  if (kind == "constant_lr" && !cfg.run.noise) {
    throw ConfigError("noise.rate", "the constant_lr ablation needs label noise");
  }
  cfg.run.validate();
  write_config(ctx);
  const fs::path dir = ctx.experiment_dir();
  std::ostringstream csv;

  if (kind == "bootstrap") {
    const auto res = bootstrap_ablation(cfg.run, seeds, ctx.threads);
    csv << "seed,unswapped_val_acc,swapped_val_acc,unswapped_ema_val_acc,swapped_ema_val_acc\n";
    std::vector<std::vector<double>> cols(4);
    for (const auto& r : res.rows) {
      csv << r.seed << ',' << fmt(r.unswapped_val_acc) << ',' << fmt(r.swapped_val_acc) << ','
          << fmt(r.unswapped_ema_val_acc) << ',' << fmt(r.swapped_ema_val_acc) << '\n';
      cols[0].push_back(r.unswapped_val_acc);
      cols[1].push_back(r.swapped_val_acc);
      cols[2].push_back(r.unswapped_ema_val_acc);
      cols[3].push_back(r.swapped_ema_val_acc);
    }
    append_mean_std(csv, cols);
    log << "bootstrap (decay " << fmt(res.bootstrap_decay) << "): unswapped " << fmt(res.unswapped.mean) << " +- "
        << fmt(res.unswapped.stddev) << ", swapped " << fmt(res.swapped.mean) << " +- " << fmt(res.swapped.stddev)
        << '\n';
  } else if (kind == "constant_lr") {
    // Post-freeze curves are measured on the test split; no selection reads it.
    const Dataset test = synthesize_test(cfg.run.dataset, cfg.run.n_test);
    std::vector<ConstantLrResult> results(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) results[i] = constant_lr_ablation(cfg.run, seeds[i], &test);
    csv << "seed,freeze_epoch,freeze_lr,decay,cosine_drop,constant_drop\n";
    std::vector<std::vector<double>> cols(2);
    std::ostringstream curves;
    curves << "seed,epoch,cosine_lr,constant_lr,cosine_ema_test_acc,constant_ema_test_acc\n";
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      const auto& r = results[i];
      const double dc = post_freeze_drop(r.cosine, r.freeze_epoch, r.decay_index);
      const double dk = post_freeze_drop(r.constant, r.freeze_epoch, r.decay_index);
      cols[0].push_back(dc);
      cols[1].push_back(dk);
      csv << seeds[i] << ',' << r.freeze_epoch << ',' << fmt(r.freeze_lr) << ',' << fmt(r.cosine.decays[r.decay_index])
          << ',' << fmt(dc) << ',' << fmt(dk) << '\n';
      for (std::size_t e = 0; e < r.cosine.epochs.size() && e < r.constant.epochs.size(); ++e) {
        const auto& a = r.cosine.epochs[e];
        const auto& b = r.constant.epochs[e];
        curves << seeds[i] << ',' << a.epoch << ',' << fmt(a.lr) << ',' << fmt(b.lr) << ','
               << fmt(a.ema[r.decay_index].track_acc) << ',' << fmt(b.ema[r.decay_index].track_acc) << '\n';
      }
    }
    csv << "mean,,,";
    for (const auto& c : cols) csv << ',' << fmt(mean_std(c).mean);
    csv << "\nstd,,,";
    for (const auto& c : cols) csv << ',' << fmt(mean_std(c).stddev);
    csv << '\n';
    write_text(dir / "ablate_constant_lr_curves.csv", curves.str());
    log << "constant_lr: post-freeze EMA test-acc drop cosine " << fmt(mean_std(cols[0]).mean) << ", constant "
        << fmt(mean_std(cols[1]).mean) << '\n';
  } else if (kind == "bn_policy") {
    const auto res = bn_policy_ablation(cfg.run, seeds, ctx.threads);
    csv << "decay,policy";
    for (const auto s : seeds) csv << ",final_seed" << s;
    csv << ",final_mean,final_std,best_mean,best_std\n";
    for (const auto& r : res.rows) {
      csv << fmt(r.decay) << ',' << to_string(r.policy);
      for (const double v : r.final_val_acc) csv << ',' << fmt(v);
      csv << ',' << fmt(r.final_mean.mean) << ',' << fmt(r.final_mean.stddev) << ',' << fmt(r.best_mean.mean) << ','
          << fmt(r.best_mean.stddev) << '\n';
    }
    std::ostringstream curves;
    curves << "decay,epoch,batch_ema_val_acc,recompute_val_acc\n";
    for (std::size_t d = 0; d < res.mean_batch_ema.size(); ++d) {
      for (std::size_t e = 0; e < res.mean_batch_ema[d].size(); ++e) {
        curves << fmt(cfg.run.ema.decays[d]) << ',' << e << ',' << fmt(res.mean_batch_ema[d][e]) << ','
               << fmt(res.mean_recompute[d][e]) << '\n';
      }
      log << "bn_policy decay " << fmt(cfg.run.ema.decays[d]) << ": recompute >= batch_ema at "
          << fmt(res.recompute_win_fraction(d)) << " of post-warmup epochs\n";
    }
    write_text(dir / "ablate_bn_policy_curves.csv", curves.str());
  } else {
    if (cfg.sweep_lrs.empty()) throw ConfigError("lr_sweep.lrs", "needs at least one learning rate");
    const auto res = lr_sweep(cfg.run, cfg.sweep_lrs, seeds, ctx.threads);
    csv << "lr,seed,diverged,baseline_best_val_acc,ema_best_val_acc\n";
    for (const auto& r : res.rows) {
      csv << fmt(r.lr) << ',' << r.seed << ',' << (r.diverged ? "diverged" : "ok") << ','
          << (r.baseline_best ? fmt(*r.baseline_best) : "") << ',' << (r.ema_best ? fmt(*r.ema_best) : "") << '\n';
    }
    for (const double lr : cfg.sweep_lrs) {
      std::vector<std::vector<double>> cols(2);
      for (const auto& r : res.rows) {
        if (r.lr != lr || r.diverged) continue;
        cols[0].push_back(*r.baseline_best);
        cols[1].push_back(*r.ema_best);
      }
      append_mean_std(csv, cols, fmt(lr) + ",");
    }
    for (const auto& [seed, agree] : res.argmax_agreement()) {
      csv << "argmax_agreement," << seed << ',' << (agree ? "yes" : "no") << ",,\n";
    }
    log << "lr_sweep: " << res.rows.size() << " runs\n";
  }
  write_text(dir / ("ablate_" + kind + ".csv"), csv.str());
  log << "wrote " << (dir / ("ablate_" + kind + ".csv")).string() << '\n';
  return kExitOk;
}

int cmd_linear_eval(const CommandContext& ctx, std::ostream& log) {
  const auto& cfg = ctx.config;
  const fs::path dir = ctx.experiment_dir();
  const DatasetSpec target_spec = transfer_target(cfg);
  const Dataset target_train = synthesize(target_spec);
  const Dataset target_eval = synthesize_test(target_spec, cfg.run.n_test);

  std::ostringstream csv;
  csv << "seed,backbone,accuracy,loss\n";
  std::map<std::string, std::vector<double>> acc;
  const std::vector<std::string> backbones = {"baseline", "ema_acc"};
  for (const auto seed : cfg.seeds) {
    const fs::path run_dir = dir / ("seed" + std::to_string(seed));
    for (const auto& b : backbones) {
      const fs::path ckpt_path = run_dir / ("ckpt_" + b + ".bin");
      if (!fs::exists(ckpt_path)) throw InputError("missing " + ckpt_path.string() + " (run train first)");
      const auto res = linear_eval(load_checkpoint(ckpt_path), target_train, target_eval, seed, cfg.linear_eval);
      acc[b].push_back(res.accuracy);
      csv << seed << ',' << b << ',' << fmt(res.accuracy) << ',' << fmt(res.loss) << '\n';
    }
  }
  if (cfg.transfer.supervised_reference) {
    RunConfig sup = cfg.run;
    sup.dataset = target_spec;
    sup.noise.reset();
    const auto runs = train_seeds(sup, cfg.seeds, options_for(ctx), ctx.threads);
    for (const auto& r : runs) {
      const auto ev = evaluate(r.checkpoints.at("baseline"), target_eval);
      acc["supervised"].push_back(ev.accuracy);
      csv << r.record.seed << ",supervised," << fmt(ev.accuracy) << ',' << fmt(ev.loss) << '\n';
    }
  }
  for (const auto& [name, values] : acc) {
    const auto s = mean_std(values);
    csv << "mean," << name << ',' << fmt(s.mean) << ",\n";
    csv << "std," << name << ',' << fmt(s.stddev) << ",\n";
    log << "linear_eval " << name << ": " << fmt(s.mean) << " +- " << fmt(s.stddev) << '\n';
  }
  write_text(dir / "linear_eval.csv", csv.str());
  return kExitOk;
}

int cmd_churn(const CommandContext& ctx, std::ostream& log) {
  if (ctx.config.seeds.size() < 2) throw ConfigError("seeds", "churn needs at least two seeds");
  const int status = cmd_train(ctx, log);
  if (status != kExitOk) return status;
  return cmd_report(ctx.experiment_dir(), log);
}

}  // namespace wavg
