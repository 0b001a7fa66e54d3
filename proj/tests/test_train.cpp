#include <gtest/gtest.h>

#include "wavg/config.hpp"
#include "wavg/errors.hpp"
#include "wavg/record_io.hpp"
#include "wavg/train.hpp"

using namespace wavg;

namespace {

RunConfig tiny() {
  RunConfig c;
  c.dataset.kind = DatasetKind::kGaussianBlobs;
  c.dataset.n_samples = 600;
  c.dataset.n_features = 8;
  c.dataset.n_classes = 3;
  c.dataset.class_separation = 2.0;
  c.n_test = 200;
  c.model.hidden_widths = {32, 32};
  c.model.batchnorm = {true, true};
  c.epochs = 6;
  c.batch_size = 64;
  c.schedule.base_lr = 0.2;
  c.schedule.warmup_epochs = 1;
  c.ema.decays = {0.9, 0.99};
  c.ema.sampling_period = 1;
  return c;
}

}  // namespace

TEST(TrainRun, DeterministicForEqualSeeds) {
  const auto a = train_run(tiny(), 3);
  const auto b = train_run(tiny(), 3);
  EXPECT_EQ(a.record, b.record);
  EXPECT_EQ(format_record(a.record), format_record(b.record));
  ASSERT_EQ(a.checkpoints.size(), b.checkpoints.size());
  for (const auto& [name, ckpt] : a.checkpoints) {
    EXPECT_EQ(encode_checkpoint(ckpt), encode_checkpoint(b.checkpoints.at(name))) << name;
  }
  const auto c = train_run(tiny(), 4);
  EXPECT_NE(a.record.epochs.back().train_loss, c.record.epochs.back().train_loss);
}

TEST(TrainRun, ZeroDecayEmaEqualsBaselineAtSyncedEpochs) {
  RunConfig cfg = tiny();
  cfg.ema.decays = {0.0};
  cfg.ema.sampling_period = 2;
  const auto r = train_run(cfg, 1);
  std::size_t synced = 0;
  for (const auto& e : r.record.epochs) {
    if (!e.ema_synced) continue;
    ++synced;
    EXPECT_EQ(e.ema[0].val_acc, e.baseline.val_acc) << e.epoch;
    EXPECT_EQ(e.ema[0].val_loss, e.baseline.val_loss) << e.epoch;
  }
  EXPECT_GT(synced, 1u);
}

TEST(TrainRun, AveragingDoesNotTouchTheBaseline) {
  RunConfig with = tiny();
  with.ema.decays = {0.5, 0.9, 0.998};
  with.ema.track_recompute = true;
  RunConfig without = tiny();
  without.ema.decays = {};
  without.swa.enabled = false;
  const auto a = train_run(with, 7);
  const auto b = train_run(without, 7);
  EXPECT_EQ(a.checkpoints.at("baseline").params, b.checkpoints.at("baseline").params);
  EXPECT_EQ(a.checkpoints.at("baseline").bn, b.checkpoints.at("baseline").bn);
  for (std::size_t i = 0; i < a.record.epochs.size(); ++i) {
    EXPECT_EQ(a.record.epochs[i].baseline, b.record.epochs[i].baseline);
  }
  EXPECT_EQ(b.checkpoints.count("ema_acc"), 0u);
  EXPECT_EQ(b.checkpoints.count("swa"), 0u);
}

TEST(TrainRun, RecordShapeAndVerdicts) {
  const RunConfig cfg = tiny();
  const auto r = train_run(cfg, 2);
  ASSERT_EQ(r.record.epochs.size(), cfg.epochs + 1);
  for (std::size_t i = 0; i < r.record.epochs.size(); ++i) {
    const auto& e = r.record.epochs[i];
    EXPECT_EQ(e.epoch, i);
    EXPECT_EQ(e.ema.size(), cfg.ema.decays.size());
    EXPECT_TRUE(e.baseline.val_acc && e.baseline.val_loss);
    EXPECT_FALSE(e.baseline.train_acc_noisy);
    EXPECT_EQ(e.swa.has_value(), i >= cfg.swa_start_epoch());
  }
  for (const auto* v : {&r.record.best_val_acc, &r.record.lowest_val_loss}) {
    ASSERT_TRUE(v->has_value());
    EXPECT_GE((*v)->epoch, 1u);
    EXPECT_LE((*v)->epoch, cfg.epochs);
    EXPECT_EQ((*v)->decay, cfg.ema.decays[(*v)->decay_index]);
  }
  const auto& best = *r.record.best_val_acc;
  EXPECT_EQ(best.value, *r.record.epochs[best.epoch].ema[best.decay_index].val_acc);
  for (const auto& e : r.record.epochs) {
    if (e.epoch == 0) continue;
    for (const auto& m : e.ema) EXPECT_LE(*m.val_acc, best.value);
  }
  const auto& acc = r.checkpoints.at("ema_acc").metadata;
  EXPECT_EQ(acc.at("epoch"), std::to_string(best.epoch));
  EXPECT_EQ(acc.at("bn_policy"), "recompute_once_final");
  EXPECT_EQ(r.checkpoints.at("ema_acc_raw").metadata.at("bn_policy"), "batch_ema");
  EXPECT_EQ(acc.at("sampling_period"), "1");
  EXPECT_EQ(r.checkpoints.at("ema_acc").params, r.checkpoints.at("ema_acc_raw").params);
  for (const auto& [name, logits] : r.val_logits) EXPECT_EQ(logits.rows, r.val_labels.size()) << name;
  EXPECT_EQ(evaluate(r.checkpoints.at("baseline"), prepare_data(cfg).split.validation).accuracy,
            *r.record.epochs.back().baseline.val_acc);
}

TEST(TrainRun, NoiseTracksCleanAndNoisyAccuracy) {
  RunConfig cfg = tiny();
  cfg.noise = NoiseSpec{0.4, 5};
  const auto r = train_run(cfg, 1);
  for (const auto& e : r.record.epochs) {
    ASSERT_TRUE(e.baseline.train_acc_clean && e.baseline.train_acc_noisy);
    ASSERT_TRUE(e.ema[0].train_acc_noisy);
  }
  // Chance level at initialization.
  EXPECT_LT(*r.record.epochs[0].baseline.train_acc_noisy, 0.6);
}

TEST(TrainRun, DivergenceIsRecordedNotThrown) {
  RunConfig cfg = tiny();
  cfg.schedule.base_lr = 1e6;
  cfg.sgd.momentum = 0.99;
  cfg.model.batchnorm = {false, false};
  const auto r = train_run(cfg, 1);
  EXPECT_TRUE(r.record.failed);
  EXPECT_FALSE(r.record.diagnostic.empty());
  EXPECT_LT(r.record.epochs.size(), cfg.epochs + 1);
}

TEST(TrainRun, BootstrapChangesTrajectory) {
  RunConfig cfg = tiny();
  const auto plain = train_run(cfg, 1);
  cfg.bootstrap.enabled = true;
  const auto boot = train_run(cfg, 1);
  EXPECT_EQ(plain.record.epochs[1].train_loss, boot.record.epochs[1].train_loss);
  EXPECT_EQ(plain.record.epochs[1].baseline, boot.record.epochs[1].baseline);
  EXPECT_NE(plain.record.epochs[2].train_loss, boot.record.epochs[2].train_loss);
  // The final student is its own SGD iterate, not a copy of the EMA.
  EXPECT_NE(boot.record.epochs.back().baseline.val_loss, boot.record.epochs.back().ema.back().val_loss);
  cfg.bootstrap.decay = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(RecordIo, RoundTrip) {
  RunConfig cfg = tiny();
  cfg.noise = NoiseSpec{0.2, 1};
  cfg.ema.track_recompute = true;
  const auto r = train_run(cfg, 9);
  const std::string text = format_record(r.record);
  EXPECT_EQ(parse_record(text), r.record);
  EXPECT_EQ(format_record(parse_record(text)), text);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(r.record.epochs.size() + 1));
  const std::string without_summary = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  EXPECT_THROW(parse_record(without_summary), InputError);
}

TEST(RecordIo, RejectsOutOfOrderEpochs) {
  RunRecord r;
  r.run_id = "x";
  r.epochs.resize(2);
  r.epochs[0].epoch = 1;
  r.epochs[1].epoch = 0;
  EXPECT_THROW(parse_record(format_record(r)), InputError);
}

TEST(RunConfigValidation, NamesTheKey) {
  auto key_of = [](RunConfig c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  RunConfig c = tiny();
  c.ema.decays = {0.99, 0.9};
  EXPECT_EQ(key_of(c), "ema.decays");
  c = tiny();
  c.schedule.warmup_epochs = 6;
  EXPECT_EQ(key_of(c), "schedule.warmup_epochs");
  c = tiny();
  c.model.batchnorm = {true};
  EXPECT_EQ(key_of(c), "model.batchnorm");
  c = tiny();
  c.dataset.n_samples = 5;
  EXPECT_EQ(key_of(c), "dataset");
  EXPECT_EQ(key_of(tiny()), "");
}

TEST(Config, BuiltinsParseAndEchoEveryDefault) {
  for (const std::string name : {"base", "noise"}) {
    const auto cfg = parse_config(builtin_config(name));
    EXPECT_NO_THROW(cfg.run.validate());
    const auto echoed = to_json(cfg);
    EXPECT_EQ(to_json(parse_config(echoed)), echoed);
    EXPECT_EQ(parse_config(echoed).run.ema.decays, (std::vector<double>{0.968, 0.984, 0.992, 0.996, 0.998}));
  }
  EXPECT_TRUE(parse_config(builtin_config("noise")).run.noise.has_value());
  EXPECT_FALSE(parse_config(builtin_config("base")).run.noise.has_value());
}

TEST(Config, MinimalConfigGetsDefaults) {
  const nlohmann::json j = {{"dataset", {{"kind", "gaussian_blobs"}}}};
  const auto cfg = parse_config(j);
  const auto echoed = to_json(cfg);
  EXPECT_EQ(echoed.at("sgd").at("momentum"), 0.9);
  EXPECT_EQ(echoed.at("train").at("batch_size"), 128);
  EXPECT_EQ(echoed.at("ema").at("sampling_period"), 16);
  EXPECT_EQ(echoed.at("ema").at("warmup"), true);
}

TEST(Config, Errors) {
  auto key_of = [](const nlohmann::json& j) {
    try {
      parse_config(j);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  EXPECT_EQ(key_of(nlohmann::json{{"sgd", {{"momentum", 0.9}}}}), "dataset");
  nlohmann::json j = builtin_config("base");
  j["sgd"]["momentun"] = 0.9;
  EXPECT_EQ(key_of(j), "sgd.momentun");
  j = builtin_config("base");
  j["bogus"] = 1;
  EXPECT_EQ(key_of(j), "bogus");
  j = builtin_config("base");
  j["train"]["epochs"] = "ten";
  EXPECT_EQ(key_of(j), "train.epochs");
}

TEST(Config, OverridesAndLists) {
  nlohmann::json j = builtin_config("base");
  apply_override(j, "train.epochs=7");
  apply_override(j, "schedule.kind=step");
  apply_override(j, "ema.decays=[0.5,0.9]");
  const auto cfg = parse_config(j);
  EXPECT_EQ(cfg.run.epochs, 7u);
  EXPECT_EQ(cfg.run.schedule.kind, ScheduleKind::kStep);
  EXPECT_EQ(cfg.run.ema.decays, (std::vector<double>{0.5, 0.9}));
  EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);
  EXPECT_EQ(parse_decay_list("0"), std::vector<double>{0.0});
  EXPECT_EQ(parse_decay_list("0.9, 0.99"), (std::vector<double>{0.9, 0.99}));
  EXPECT_EQ(parse_seed_list("1,2,3"), (std::vector<std::uint64_t>{1, 2, 3}));
  EXPECT_THROW(parse_seed_list("1,x"), ConfigError);
}

TEST(Config, TransferTargetShiftsCenters) {
  auto cfg = parse_config(builtin_config("base"));
  const auto t = transfer_target(cfg);
  EXPECT_EQ(t.center_shift, cfg.transfer.center_shift);
  EXPECT_EQ(t.n_features, cfg.run.dataset.n_features);
}
