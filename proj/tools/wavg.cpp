#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wavg/commands.hpp"
#include "wavg/config.hpp"
#include "wavg/errors.hpp"
#include "wavg/experiments.hpp"

namespace {

struct CommonFlags {
  std::string config = "base";
  std::string seeds;
  std::string out = "runs";
  std::vector<std::string> overrides;
  std::string ema_decays;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "built-in config name (base, noise) or JSON file")->capture_default_str();
  cmd->add_option("--seed", f.seeds, "seed or comma-separated seeds (default: config seeds)");
  cmd->add_option("--out", f.out, "output root")->capture_default_str();
  cmd->add_option("--override", f.overrides, "dotted key=value, applied in order")->take_all();
  cmd->add_option("--ema-decays", f.ema_decays, "comma-separated EMA decays, e.g. 0 or 0.99,0.999");
  cmd->add_flag("-v,--verbose", f.verbose, "per-epoch progress on stderr");
}

wavg::CommandContext make_context(const CommonFlags& f) {
  nlohmann::json j = wavg::load_config_json(f.config);
  for (const auto& o : f.overrides) wavg::apply_override(j, o);
  if (!f.ema_decays.empty()) j["ema"]["decays"] = wavg::parse_decay_list(f.ema_decays);
  if (!f.seeds.empty()) j["seeds"] = wavg::parse_seed_list(f.seeds);
  wavg::CommandContext ctx;
  ctx.config = wavg::parse_config(j);
  ctx.out = f.out;
  ctx.threads = wavg::thread_count_from_env();
  ctx.verbose = f.verbose;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight averaging experiments on synthetic tasks"};
  app.require_subcommand(1);

  CommonFlags train_f, ablate_f, lin_f, churn_f;
  auto* train = app.add_subcommand("train", "train one run per seed and persist artifacts");
  add_common(train, train_f);

  std::string ablate_kind;
  auto* ablate = app.add_subcommand("ablate", "paired ablation: bootstrap, constant_lr, bn_policy, lr_sweep");
  ablate->add_option("kind", ablate_kind, "ablation kind")
      ->required()
      ->check(CLI::IsMember({"bootstrap", "constant_lr", "bn_policy", "lr_sweep"}));
  add_common(ablate, ablate_f);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "test-set metrics for a trained experiment directory");
  report->add_option("dir", report_dir, "experiment directory, <out>/<experiment>")->required();

  auto* lin = app.add_subcommand("linear-eval", "linear probe of trained backbones on a shifted task");
  add_common(lin, lin_f);

  auto* churn = app.add_subcommand("churn", "train all seeds, then report cross-seed churn");
  add_common(churn, churn_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return wavg::cmd_train(make_context(train_f), std::cout);
    if (*ablate) return wavg::cmd_ablate(ablate_kind, make_context(ablate_f), std::cout);
    if (*report) return wavg::cmd_report(report_dir, std::cout);
    if (*lin) return wavg::cmd_linear_eval(make_context(lin_f), std::cout);
    if (*churn) return wavg::cmd_churn(make_context(churn_f), std::cout);
  } catch (const wavg::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return wavg::kExitConfigError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return wavg::kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return wavg::kExitFailure;
  }
  return wavg::kExitFailure;
}
