// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wavg/averaging.hpp"
#include "wavg/config.hpp"
#include "wavg/experiments.hpp"
#include "wavg/metrics.hpp"
#include "wavg/model.hpp"
#include "wavg/train.hpp"

namespace fs = std::filesystem;
using namespace wavg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

ExperimentConfig base_config() { return parse_config(builtin_config("base")); }

Tensor2 random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor2 t(r, c);
  for (double& v : t.data) v = d(rng);
  return t;
}

MlpSpec spec_of(std::vector<std::size_t> widths, std::vector<bool> bn) {
  MlpSpec s;
  s.layer_widths = std::move(widths);
  s.use_batchnorm = std::move(bn);
  s.n_classes = s.layer_widths.back();
  return s;
}

// ---- 1 ----
Outcome gradient_correctness() {
  std::mt19937_64 rng(2024);
  const std::vector<MlpSpec> specs = {spec_of({6, 5}, {}),          spec_of({6, 10, 4}, {false}),
                                      spec_of({6, 10, 4}, {true}),   spec_of({6, 12, 8, 4}, {true, true}),
                                      spec_of({6, 12, 8, 4}, {true, false})};
  double worst = 0.0;
  for (int draw = 0; draw < 10; ++draw) {
    const Mlp m(specs[static_cast<std::size_t>(draw) % specs.size()]);
    ParamVector p = m.init_params(rng);
    std::normal_distribution<double> jitter(0.0, 0.2);
    for (double& v : p.values()) v += jitter(rng);
    const Tensor2 x = random_tensor(8, m.spec().input_width(), rng);
    std::uniform_int_distribution<int> lab(0, static_cast<int>(m.spec().n_classes) - 1);
    std::vector<int> y(8);
    for (int& v : y) v = lab(rng);
    worst = std::max(worst, grad_check(m, p, m.init_bn(), x, y, 1e-5));
  }
  return {worst < 1e-4, "max relative error " + std::to_string(worst) + " over 10 draws (< 1e-4)"};
}

// ---- 2 ----
Outcome ema_closed_form() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-3.0, 3.0), ua(0.0, 0.9999);
  std::uniform_int_distribution<int> len(1, 100);
  auto layout = std::make_shared<ParamLayout>();
  layout->segments.push_back({0, "weight", 0, 1});
  layout->total = 1;
  const BnStats none;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const double a = ua(rng), x0 = u(rng);
    const int n = len(rng);
    EmaState s = EmaState::start(a, 1, ParamVector(layout, {x0}), none, false);
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (double& x : xs) {
      x = u(rng);
      ema_update(s, ParamVector(layout, {x}), none);
    }
    // Brute-force unrolled recursion in long double.
    long double ref = x0;
    for (double x : xs) ref = a * ref + (1.0L - a) * x;
    worst = std::max(worst, std::abs(s.averaged_params[0] - static_cast<double>(ref)));
  }
  bool warm_ok = true;
  for (double a : {0.0, 0.05, 0.1, 0.5, 0.968, 0.998}) {
    const EmaState s = EmaState::start(a, 16, ParamVector(layout, {0.0}), none, true);
    warm_ok = warm_ok && s.next_decay() == std::min(a, 0.1);
  }
  return {worst <= 1e-12 && warm_ok,
          "max |ema - recursion| " + std::to_string(worst) + ", warm-up at t=0 " + (warm_ok ? "exact" : "WRONG")};
}

// ---- 3 ----
Outcome decay_equivalence() {
  const std::vector<std::pair<double, double>> table = {
      {0.999875, 0.998}, {0.99975, 0.996}, {0.9995, 0.992}, {0.999, 0.984}, {0.998, 0.968}};
  double worst = 0.0;
  for (const auto& [t1, t16] : table) worst = std::max(worst, std::abs(effective_decay(t1, 1, 16) - t16));
  const double back = effective_decay(0.984, 16, 1);
  const bool ok = worst <= 1e-3 && std::abs(back - 0.999) <= 5e-4;
  return {ok, "max row error " + std::to_string(worst) + ", 0.984^(1/16) = " + num(back, 6)};
}

// ---- 4 ----
Outcome metric_oracles() {
  std::mt19937_64 rng(99);
  bool ok = true;
  std::string why;
  auto fail = [&](const std::string& w) {
    if (ok) why = w;
    ok = false;
  };
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 8 + static_cast<std::size_t>(rng() % 40), c = 2 + static_cast<std::size_t>(rng() % 4);
    auto make = [&](double scale) {
      Tensor2 z = random_tensor(n, c, rng, scale);
      std::vector<int> y(n);
      for (int& v : y) v = static_cast<int>(rng() % c);
      return PredictionSet::from_logits(std::move(z), std::move(y));
    };
    const auto a = make(2.0), b = make(2.0);
    // Brute-force references.
    std::size_t diff = 0;
    double js = 0.0, acc = 0.0, nll = 0.0;
    std::vector<std::pair<double, std::size_t>> conf;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t ta = 0, tb = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (a.probs(i, k) > a.probs(i, ta)) ta = k;
        if (b.probs(i, k) > b.probs(i, tb)) tb = k;
      }
      diff += ta != tb;
      acc += static_cast<int>(ta) == a.labels[i];
      nll -= std::log(std::max(a.probs(i, static_cast<std::size_t>(a.labels[i])), 1e-12));
      conf.push_back({a.probs(i, ta), i});
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double p = a.probs(i, k), q = b.probs(i, k), m = 0.5 * (p + q);
        if (p > 0) s += 0.5 * p * std::log(p / m);
        if (q > 0) s += 0.5 * q * std::log(q / m);
      }
      if (s > std::log(2.0) + 1e-15) fail("JS above ln 2");
      js += s;
    }
    std::sort(conf.begin(), conf.end());
    const std::size_t bins = 1 + static_cast<std::size_t>(rng() % n);
    double ece = 0.0;
    for (std::size_t bin = 0, pos = 0; bin < bins; ++bin) {
      const std::size_t size = n / bins + (bin < n % bins ? 1 : 0);
      double cs = 0.0, as = 0.0;
      for (std::size_t k = pos; k < pos + size; ++k) {
        const std::size_t i = conf[k].second;
        cs += conf[k].first;
        std::size_t top = 0;
        for (std::size_t j = 1; j < c; ++j)
          if (a.probs(i, j) > a.probs(i, top)) top = j;
        as += static_cast<int>(top) == a.labels[i];
      }
      ece += std::abs(as - cs) / static_cast<double>(n);
      pos += size;
    }
    if (churn(a, b) != static_cast<double>(diff) / static_cast<double>(n)) fail("churn");
    if (std::abs(js_divergence(a, b) - js / static_cast<double>(n)) > 1e-12) fail("js");
    if (std::abs(ece_equal_mass(a, {bins}) - ece) > 1e-12) fail("ece");
    const auto an = accuracy_nll(a);
    if (std::abs(an.accuracy - acc / static_cast<double>(n)) > 1e-12) fail("accuracy");
    if (std::abs(an.nll - nll / static_cast<double>(n)) > 1e-12) fail("nll");
    const auto holdout = make(4.0);
    const auto fit = temperature_scale(holdout, a, {bins});
    if (fit.holdout_nll > fit.holdout_nll_at_one) fail("temperature scaling raised holdout NLL");
    Tensor2 scaled = *a.logits;
    for (double& v : scaled.data) v /= fit.temperature;
    if (accuracy_nll(PredictionSet::from_logits(scaled, a.labels)).accuracy != an.accuracy) {
      fail("temperature scaling changed top-1");
    }
  }
  return {ok, ok ? "50 random instances match brute-force oracles" : "mismatch: " + why};
}

// ---- 5 ----
Outcome non_interference() {
  const auto cfg = base_config();
  RunConfig bare = cfg.run;
  bare.ema.decays.clear();
  bare.swa.enabled = false;
  const auto with = train_run(cfg.run, 1);
  const auto without = train_run(bare, 1);
  const bool same = with.checkpoints.at("baseline").params == without.checkpoints.at("baseline").params &&
                    with.checkpoints.at("baseline").bn == without.checkpoints.at("baseline").bn;
  return {same, same ? "final baseline parameters bit-identical with and without EMA bank + SWA"
                     : "baseline parameters differ"};
}

// ---- 6 ----
Outcome bn_recompute() {
  std::mt19937_64 rng(5);
  const Mlp m(spec_of({20, 64, 64, 5}, {true, true}));
  const ParamVector p = m.init_params(rng);
  const Tensor2 x = random_tensor(128, 20, rng, 1.5);
  const BnStats bn = recompute_bn(m, p, x, 128);
  BnStats scratch = m.init_bn();
  BatchMoments mom;
  m.forward(p, scratch, x, Mode::kTrain, &mom);
  double worst = 0.0;
  for (std::size_t l = 0; l < bn.layers.size(); ++l) {
    for (std::size_t c = 0; c < bn.layers[l].running_mean.size(); ++c) {
      worst = std::max(worst, std::abs(bn.layers[l].running_mean[c] - mom.mean[l][c]));
      worst = std::max(worst, std::abs(bn.layers[l].running_var[c] - mom.var[l][c]));
    }
  }
  const auto cfg = base_config();
  const auto abl = bn_policy_ablation(cfg.run, kSeeds, thread_count_from_env());
  const std::size_t largest = cfg.run.ema.decays.size() - 1;
  const double frac = abl.recompute_win_fraction(largest);
  return {worst <= 1e-10 && frac >= 0.8,
          "one-batch max error " + std::to_string(worst) + "; alpha=" + num(cfg.run.ema.decays[largest], 3) +
              " recompute >= batch_ema at " + num(100 * frac, 1) + "% of post-warmup epochs (>= 80%)"};
}

// Criterion 7 runs, reused by 9.
struct BaseRuns {
  std::vector<TrainResult> runs;
  Dataset test;
};
const BaseRuns& base_runs() {
  static const BaseRuns r = [] {
    const auto cfg = base_config();
    BaseRuns b;
    b.runs = train_seeds(cfg.run, kSeeds, {}, thread_count_from_env());
    b.test = synthesize_test(cfg.run.dataset, cfg.run.n_test);
    return b;
  }();
  return r;
}

// ---- 7 ----
Outcome generalization() {
  const auto& b = base_runs();
  int wins = 0;
  double ema_loss = 0.0, base_loss = 0.0;
  std::string per_seed;
  for (const auto& r : b.runs) {
    const auto base = evaluate(r.checkpoints.at("baseline"), b.test);
    const auto ema_acc = evaluate(r.checkpoints.at("ema_acc"), b.test);
    const auto ema_l = evaluate(r.checkpoints.at("ema_loss"), b.test);
    wins += ema_acc.accuracy >= base.accuracy;
    ema_loss += ema_l.loss / 3.0;
    base_loss += base.loss / 3.0;
    per_seed += " " + r.record.run_id + " " + num(ema_acc.accuracy) + "/" + num(base.accuracy);
  }
  return {wins >= 2 && ema_loss <= base_loss, "EMA>=baseline test acc in " + std::to_string(wins) + "/3 seeds (" +
                                                  per_seed.substr(1) + "); mean test loss EMA " + num(ema_loss) +
                                                  " vs baseline " + num(base_loss)};
}

// ---- 8 ----
Outcome label_noise() {
  const auto cfg = parse_config(builtin_config("noise"));
  const Dataset test = synthesize_test(cfg.run.dataset, cfg.run.n_test);
  std::vector<ConstantLrResult> res(kSeeds.size());
  for (std::size_t i = 0; i < kSeeds.size(); ++i) res[i] = constant_lr_ablation(cfg.run, kSeeds[i], &test);
  const std::size_t largest = cfg.run.ema.decays.size() - 1;
  double gap = 0.0, mem_ema = 0.0, mem_base = 0.0, drop_cos = 0.0, drop_const = 0.0;
  bool matched = true;
  for (const auto& r : res) {
    const auto& rec = r.cosine;
    double best = 0.0;
    for (const auto& e : rec.epochs) best = std::max(best, *e.ema[r.decay_index].track_acc);
    gap += (best - *rec.epochs.back().baseline.track_acc) / 3.0;
    const auto curve = memorization_curve(rec, largest);
    const auto me = noisy_at_clean(curve.ema, 0.9), mb = noisy_at_clean(curve.baseline, 0.9);
    if (!me || !mb) {
      matched = false;
    } else {
      mem_ema += *me / 3.0;
      mem_base += *mb / 3.0;
    }
    drop_cos += post_freeze_drop(r.cosine, r.freeze_epoch, r.decay_index) / 3.0;
    drop_const += post_freeze_drop(r.constant, r.freeze_epoch, r.decay_index) / 3.0;
  }
  const bool ok = gap >= 0.02 && matched && mem_ema < mem_base && drop_const < drop_cos;
  return {ok, "max EMA test acc - final baseline = " + num(100 * gap, 2) + " pts (>= 2); noisy-label acc at 90% clean: EMA " +
                  (matched ? num(mem_ema) + " vs baseline " + num(mem_base) : std::string("n/a (90% not reached)")) +
                  "; post-freeze drop constant " + num(drop_const) + " vs cosine " + num(drop_cos)};
}

// ---- 9 ----
Outcome churn_trend() {
  const auto& b = base_runs();
  const auto ex = churn_from_runs(b.runs, b.test);
  const auto& base = ex.summary.at("baseline");
  const auto& ema = ex.summary.at("ema_loss");
  const bool ok = ema.churn.mean < base.churn.mean && ema.js.mean < base.js.mean;
  return {ok, "mean pairwise churn EMA " + num(ema.churn.mean) + " vs baseline " + num(base.churn.mean) + "; JS EMA " +
                  num(ema.js.mean, 5) + " vs baseline " + num(base.js.mean, 5)};
}

// ---- 10 ----
Outcome bootstrap() {
  const auto cfg = base_config();
  const auto res = bootstrap_ablation(cfg.run, kSeeds, thread_count_from_env());
  return {res.swapped.mean <= res.unswapped.mean, "mean final val acc bootstrapped " + num(res.swapped.mean) +
                                                      " vs unswapped " + num(res.unswapped.mean) + " (decay " +
                                                      num(res.bootstrap_decay, 3) + ")"};
}

// ---- 11 ----
int run_cli(const std::string& args) {
  const int raw = std::system((std::string(WAVG_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "wavg_acceptance_determinism";
  fs::remove_all(root);
  const std::string common = "--config base --seed 1,2 --override train.epochs=10";
  for (const char* sub : {"a", "b"}) {
    if (run_cli("train " + common + " --out " + (root / sub).string()) != 0 ||
        run_cli("report " + (root / sub / "base").string()) != 0) {
      return {false, "CLI invocation failed"};
    }
  }
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    differ += slurp(e.path()) != slurp(root / "b" / fs::relative(e.path(), root / "a"));
  }
  fs::remove_all(root);
  return {files > 0 && differ == 0,
          std::to_string(files) + " files (records, checkpoints, predictions, reports), " + std::to_string(differ) +
              " differ"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"EMA closed form", ema_closed_form},
      {"decay equivalence table", decay_equivalence},
      {"metric oracles", metric_oracles},
      {"non-interference", non_interference},
      {"BN recompute", bn_recompute},
      {"generalization trend", generalization},
      {"label-noise trend", label_noise},
      {"churn trend", churn_trend},
      {"bootstrap ablation", bootstrap},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::cout << "criterion " << (i + 1) << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << " [" << num(secs, 1) << " s]" << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
