#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "wavg/averaging.hpp"
#include "wavg/errors.hpp"

using namespace wavg;

namespace {

ParamVector scalars(std::vector<double> v) {
  auto layout = std::make_shared<ParamLayout>();
  layout->segments.push_back({0, "weight", 0, v.size()});
  layout->total = v.size();
  return ParamVector(layout, std::move(v));
}

MlpSpec spec_of(std::vector<std::size_t> widths, std::vector<bool> bn) {
  MlpSpec s;
  s.layer_widths = std::move(widths);
  s.use_batchnorm = std::move(bn);
  s.n_classes = s.layer_widths.back();
  return s;
}

Tensor2 random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.5, 2.0);
  Tensor2 t(r, c);
  for (double& v : t.data) v = d(rng);
  return t;
}

}  // namespace

TEST(EffectiveDecay, KnownEquivalences) {
  EXPECT_NEAR(effective_decay(0.984, 16, 1), 0.999, 5e-4);
  EXPECT_NEAR(effective_decay(0.999875, 1, 16), 0.998, 1e-3);
  EXPECT_EQ(effective_decay(0.97, 8, 8), 0.97);
}

TEST(EffectiveDecay, RoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 0.9999);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng);
    for (std::size_t T : {2, 16, 64}) EXPECT_NEAR(effective_decay(effective_decay(a, 1, T), T, 1), a, 1e-12);
  }
}

TEST(Ema, WarmupAtFirstUpdate) {
  EXPECT_EQ(warmup_decay(0.998, 0), 0.1);
  EXPECT_EQ(warmup_decay(0.05, 0), 0.05);
  EXPECT_DOUBLE_EQ(warmup_decay(0.998, 5), 6.0 / 15.0);
  EXPECT_EQ(warmup_decay(0.9, 1000), 0.9);
}

TEST(Ema, ZeroDecayTracksCurrent) {
  const BnStats none;
  EmaState s = EmaState::start(0.0, 1, scalars({5.0}), none, true);
  for (double x : {1.0, -3.0, 8.5}) {
    ema_update(s, scalars({x}), none);
    EXPECT_EQ(s.averaged_params[0], x);
  }
  EXPECT_EQ(s.update_count, 3u);
}

TEST(Ema, HalfDecayTwoUpdates) {
  const BnStats none;
  EmaState s = EmaState::start(0.5, 1, scalars({0.0}), none, false);
  ema_update(s, scalars({2.0}), none);
  ema_update(s, scalars({4.0}), none);
  EXPECT_EQ(s.averaged_params[0], 2.5);
}

TEST(Ema, ClosedFormOnRandomSequences) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> ua(0.0, 0.999);
  std::uniform_int_distribution<int> len(1, 100);
  const BnStats none;
  for (int trial = 0; trial < 100; ++trial) {
    const double a = ua(rng);
    const double x0 = u(rng);
    const int n = len(rng);
    std::vector<double> xs(n);
    for (double& x : xs) x = u(rng);
    EmaState s = EmaState::start(a, 1, scalars({x0}), none, false);
    for (double x : xs) ema_update(s, scalars({x}), none);
    long double closed = std::pow(static_cast<long double>(a), n) * x0;
    for (int i = 1; i <= n; ++i) closed += (1.0L - a) * std::pow(static_cast<long double>(a), n - i) * xs[i - 1];
    EXPECT_NEAR(s.averaged_params[0], static_cast<double>(closed), 1e-12);
  }
}

TEST(Ema, BnStatsAveragedLikeParameters) {
  BnStats b0, b1;
  b0.layers.push_back({0, {1.0}, {2.0}});
  b1.layers.push_back({0, {3.0}, {6.0}});
  EmaState s = EmaState::start(0.75, 1, scalars({0.0}), b0, false);
  ema_update(s, scalars({4.0}), b1);
  EXPECT_EQ(s.averaged_params[0], 1.0);
  EXPECT_EQ(s.averaged_bn.layers[0].running_mean[0], 1.5);
  EXPECT_EQ(s.averaged_bn.layers[0].running_var[0], 3.0);
}

TEST(Ema, LayoutMismatch) {
  const BnStats none;
  EmaState s = EmaState::start(0.5, 1, scalars({0.0}), none, false);
  EXPECT_THROW(ema_update(s, scalars({1.0, 2.0}), none), InputError);
}

TEST(EmaBank, CadenceAndValidation) {
  const BnStats none;
  EmaBank bank({0.0, 0.9}, 4, scalars({0.0}), none, false);
  EXPECT_FALSE(bank.due(3));
  EXPECT_TRUE(bank.due(4));
  EXPECT_TRUE(bank.due(8));
  bank.update(scalars({2.0}), none);
  EXPECT_EQ(bank.state(0).averaged_params[0], 2.0);
  EXPECT_NEAR(bank.state(1).averaged_params[0], 0.2, 1e-15);
  EXPECT_THROW(EmaBank({0.9, 0.5}, 1, scalars({0.0}), none, true), InputError);
  EXPECT_THROW(EmaBank({0.9, 1.0}, 1, scalars({0.0}), none, true), InputError);
  EXPECT_THROW(EmaBank({0.9}, 0, scalars({0.0}), none, true), InputError);
}

TEST(Swa, ExactMeans) {
  const BnStats none;
  SwaState s = SwaState::start(3, scalars({0.0}), none);
  EXPECT_THROW(swa_update(s, scalars({1.0}), none, 2), ContractError);
  swa_update(s, scalars({1.0}), none, 3);
  EXPECT_EQ(s.mean_params[0], 1.0);
  swa_update(s, scalars({3.0}), none, 4);
  swa_update(s, scalars({8.0}), none, 5);
  EXPECT_EQ(s.mean_params[0], 4.0);
  EXPECT_EQ(s.count, 3u);

  SwaState c = SwaState::start(0, scalars({0.0}), none);
  for (int i = 0; i < 7; ++i) swa_update(c, scalars({0.3}), none, i);
  EXPECT_NEAR(c.mean_params[0], 0.3, 1e-15);
}

TEST(Swa, ThousandRandomCheckpoints) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  const BnStats none;
  SwaState s = SwaState::start(0, scalars({0.0, 0.0}), none);
  long double sum0 = 0.0L, sum1 = 0.0L;
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng), b = u(rng);
    sum0 += a;
    sum1 += b;
    swa_update(s, scalars({a, b}), none, i);
  }
  EXPECT_NEAR(s.mean_params[0], static_cast<double>(sum0 / 1000), 1e-12);
  EXPECT_NEAR(s.mean_params[1], static_cast<double>(sum1 / 1000), 1e-12);
}

TEST(RecomputeBn, SingleBatchMatchesBatchStatistics) {
  std::mt19937_64 rng(4);
  const Mlp m(spec_of({5, 6, 4, 3}, {true, true}));
  const ParamVector p = m.init_params(rng);
  const Tensor2 x = random_tensor(32, 5, rng);
  const BnStats bn = recompute_bn(m, p, x, 64);
  BnStats scratch = m.init_bn();
  BatchMoments mom;
  m.forward(p, scratch, x, Mode::kTrain, &mom);
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t c = 0; c < bn.layers[l].running_mean.size(); ++c) {
      EXPECT_NEAR(bn.layers[l].running_mean[c], mom.mean[l][c], 1e-10);
      EXPECT_NEAR(bn.layers[l].running_var[c], mom.var[l][c], 1e-10);
    }
  }
}

TEST(RecomputeBn, ConstantInputHasZeroVariance) {
  std::mt19937_64 rng(5);
  const Mlp m(spec_of({3, 4, 2}, {true}));
  const ParamVector p = m.init_params(rng);
  const Tensor2 x(12, 3, 0.7);
  const BnStats bn = recompute_bn(m, p, x, 5);
  const auto w = p.segment(0, "weight");
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(bn.layers[0].running_var[c], 0.0, 1e-24);
    const double act = 0.7 * (w[0 * 4 + c] + w[1 * 4 + c] + w[2 * 4 + c]);
    EXPECT_NEAR(bn.layers[0].running_mean[c], act, 1e-14);
  }
}

TEST(RecomputeBn, TwoBatchesMatchWholeDatasetMomentsInFirstLayer) {
  std::mt19937_64 rng(6);
  const Mlp m(spec_of({3, 4, 2}, {true}));
  const ParamVector p = m.init_params(rng);
  const Tensor2 x = random_tensor(20, 3, rng);
  const BnStats bn = recompute_bn(m, p, x, 10);
  const auto w = p.segment(0, "weight");
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> z(20);
    double mean = 0.0;
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t i = 0; i < 3; ++i) z[r] += x(r, i) * w[i * 4 + c];
      mean += z[r];
    }
    mean /= 20.0;
    double var = 0.0;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= 20.0;
    EXPECT_NEAR(bn.layers[0].running_mean[c], mean, 1e-12);
    EXPECT_NEAR(bn.layers[0].running_var[c], var, 1e-12);
  }
}

TEST(RecomputeBn, EmptyDatasetIsInputError) {
  const Mlp m(spec_of({3, 4, 2}, {true}));
  std::mt19937_64 rng(7);
  EXPECT_THROW(recompute_bn(m, m.init_params(rng), Tensor2(0, 3), 8), InputError);
}

TEST(Materialize, PoliciesAgreeWithoutBn) {
  std::mt19937_64 rng(8);
  const Mlp m(spec_of({3, 5, 2}, {false}));
  const ParamVector p = m.init_params(rng);
  EmaState s = EmaState::start(0.9, 1, p, m.init_bn(), true);
  ema_update(s, m.init_params(rng), m.init_bn());
  const Tensor2 x = random_tensor(10, 3, rng);
  const auto a = materialize(s, BnPolicy::kBatchEma, m, x, 4);
  for (BnPolicy pol : {BnPolicy::kRecomputeEachEpoch, BnPolicy::kRecomputeOnceFinal}) {
    const auto b = materialize(s, pol, m, x, 4);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(m.predict(a.params, a.bn, x), m.predict(b.params, b.bn, x));
  }
}

TEST(Materialize, ZeroUpdatesIsContractError) {
  std::mt19937_64 rng(9);
  const Mlp m(spec_of({3, 5, 2}, {true}));
  const ParamVector p = m.init_params(rng);
  const EmaState s = EmaState::start(0.9, 1, p, m.init_bn(), true);
  EXPECT_THROW(materialize(s, BnPolicy::kBatchEma, m, Tensor2(4, 3), 2), ContractError);
  const SwaState w = SwaState::start(0, p, m.init_bn());
  EXPECT_THROW(materialize(w, BnPolicy::kRecomputeOnceFinal, m, Tensor2(4, 3), 2), ContractError);
}

TEST(Materialize, ZeroDecayBatchEmaEqualsLastIterate) {
  std::mt19937_64 rng(10);
  const Mlp m(spec_of({3, 5, 2}, {true}));
  EmaState s = EmaState::start(0.0, 1, m.init_params(rng), m.init_bn(), true);
  ParamVector last;
  BnStats last_bn = m.init_bn();
  const Tensor2 x = random_tensor(8, 3, rng);
  for (int i = 0; i < 3; ++i) {
    last = m.init_params(rng);
    m.forward(last, last_bn, x, Mode::kTrain);
    ema_update(s, last, last_bn);
  }
  const auto e = materialize(s, BnPolicy::kBatchEma, m, x, 4);
  EXPECT_EQ(e.params, last);
  EXPECT_EQ(e.bn, last_bn);
  const auto r1 = materialize(s, BnPolicy::kRecomputeOnceFinal, m, x, 4);
  const auto r2 = materialize(s, BnPolicy::kRecomputeOnceFinal, m, x, 4);
  EXPECT_EQ(m.predict(r1.params, r1.bn, x), m.predict(r2.params, r2.bn, x));
}

TEST(BnPolicy, NamesRoundTrip) {
  for (BnPolicy p : {BnPolicy::kBatchEma, BnPolicy::kRecomputeEachEpoch, BnPolicy::kRecomputeOnceFinal}) {
    EXPECT_EQ(parse_bn_policy(to_string(p)), p);
  }
  EXPECT_THROW(parse_bn_policy("nope"), InputError);
}
