#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "wavg/errors.hpp"
#include "wavg/optim.hpp"

using namespace wavg;

namespace {

Schedule cosine(double lr, std::size_t warmup, std::size_t epochs, std::size_t spe) {
  Schedule s;
  s.kind = ScheduleKind::kWarmupCosine;
  s.base_lr = lr;
  s.warmup_epochs = warmup;
  s.total_epochs = epochs;
  s.steps_per_epoch = spe;
  return s;
}

ParamVector scalar_vector(std::vector<double> v) {
  auto layout = std::make_shared<ParamLayout>();
  layout->segments.push_back({0, "weight", 0, v.size()});
  layout->total = v.size();
  return ParamVector(layout, std::move(v));
}

}  // namespace

TEST(Schedule, FirstPostWarmupStepIsBaseLr) {
  const Schedule s = cosine(0.4, 3, 60, 10);
  EXPECT_DOUBLE_EQ(lr_at(s, 30), 0.4);
}

TEST(Schedule, CosineMidpointIsHalf) {
  const Schedule s = cosine(0.4, 3, 63, 10);
  EXPECT_NEAR(lr_at(s, 30 + 300), 0.2, 1e-15);
}

TEST(Schedule, WarmupRampsLinearlyFromFirstStep) {
  const Schedule s = cosine(1.0, 2, 10, 5);
  for (std::size_t t = 0; t < 10; ++t) EXPECT_DOUBLE_EQ(lr_at(s, t), static_cast<double>(t + 1) / 10.0);
}

TEST(Schedule, StepKindAfterTwoMilestones) {
  Schedule s;
  s.kind = ScheduleKind::kStep;
  s.base_lr = 1.0;
  s.step_factor = 0.2;
  s.milestones = {60, 120, 160};
  s.total_epochs = 200;
  s.steps_per_epoch = 4;
  EXPECT_NEAR(lr_at(s, 130 * 4), 1.0 / 25.0, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(s, 59 * 4 + 3), 1.0);
  EXPECT_NEAR(lr_at(s, 60 * 4), 0.2, 1e-15);
}

TEST(Schedule, ConstantEverywhere) {
  Schedule s = cosine(0.3, 2, 10, 3);
  s.kind = ScheduleKind::kConstant;
  for (std::size_t t = 0; t < s.total_steps(); ++t) EXPECT_EQ(lr_at(s, t), 0.3);
}

TEST(Schedule, NonIncreasingAfterWarmup) {
  for (ScheduleKind kind : {ScheduleKind::kWarmupCosine, ScheduleKind::kStep}) {
    Schedule s = cosine(0.5, 5, 80, 7);
    s.kind = kind;
    s.milestones = {20, 40, 70};
    for (std::size_t t = s.warmup_steps() + 1; t < s.total_steps(); ++t) EXPECT_LE(lr_at(s, t), lr_at(s, t - 1));
  }
}

TEST(Schedule, CosineTailNearZero) {
  for (std::size_t epochs : {50, 60, 200}) {
    const Schedule s = cosine(0.8, 5, epochs, 3);
    EXPECT_LT(lr_at(s, s.total_steps() - 1), 1e-3 * 0.8);
  }
}

TEST(Schedule, BeyondBudgetIsContractError) {
  const Schedule s = cosine(0.1, 1, 5, 2);
  EXPECT_NO_THROW(lr_at(s, 9));
  EXPECT_THROW(lr_at(s, 10), ContractError);
}

TEST(Schedule, FreezeHoldsRate) {
  Schedule s = cosine(0.4, 3, 30, 10);
  const Schedule plain = s;
  s.freeze_after_step = 120;
  for (std::size_t t = 0; t <= 120; ++t) EXPECT_EQ(lr_at(s, t), lr_at(plain, t));
  for (std::size_t t = 121; t < s.total_steps(); ++t) EXPECT_EQ(lr_at(s, t), lr_at(plain, 120));
}

TEST(Schedule, Validation) {
  EXPECT_THROW(cosine(0.1, 5, 5, 1).validate(), InputError);
  EXPECT_THROW(cosine(0.0, 1, 5, 1).validate(), InputError);
  Schedule s = cosine(0.1, 1, 10, 1);
  s.milestones = {5, 5};
  EXPECT_THROW(s.validate(), InputError);
  s.milestones = {3, 10};
  EXPECT_THROW(s.validate(), InputError);
}

TEST(Sgd, PlainGradientDescent) {
  ParamVector p = scalar_vector({1.0, -2.0, 0.5});
  const ParamVector g = scalar_vector({0.3, 0.1, -4.0});
  SgdState st = SgdState::for_params(p, 0.0, 0.0, true);
  sgd_step(p, g, st, 0.1);
  EXPECT_EQ(p[0], 1.0 - 0.1 * 0.3);
  EXPECT_EQ(p[1], -2.0 - 0.1 * 0.1);
  EXPECT_EQ(p[2], 0.5 - 0.1 * -4.0);
}

TEST(Sgd, ZeroGradientZeroBufferIsFixedPoint) {
  ParamVector p = scalar_vector({1.0, -2.0});
  const ParamVector before = p;
  SgdState st = SgdState::for_params(p, 0.9, 0.0, true);
  sgd_step(p, scalar_vector({0.0, 0.0}), st, 0.5);
  EXPECT_EQ(p, before);
}

TEST(Sgd, TwoNesterovStepsOnQuadratic) {
  // f(x) = 0.5 * a * x^2, gradient a * x, weight decay wd.
  const double a = 3.0, wd = 0.01, mu = 0.9, lr = 0.05;
  ParamVector p = scalar_vector({2.0});
  SgdState st = SgdState::for_params(p, mu, wd, true);
  double x = 2.0, buf = 0.0;
  for (int k = 0; k < 2; ++k) {
    sgd_step(p, scalar_vector({a * p[0]}), st, lr);
    const double g = a * x + wd * x;
    buf = mu * buf + g;
    x = x - lr * (g + mu * buf);
  }
  EXPECT_NEAR(p[0], x, 1e-12);
  // Hand-unrolled: step 1 g1 = 6.02, b1 = 6.02, x1 = 2 - 0.05*(6.02+5.418) = 1.4281.
  EXPECT_NEAR(p[0], [] {
    const double x1 = 2.0 - 0.05 * (6.02 + 0.9 * 6.02);
    const double g2 = 3.01 * x1;
    const double b2 = 0.9 * 6.02 + g2;
    return x1 - 0.05 * (g2 + 0.9 * b2);
  }(), 1e-12);
}

TEST(Sgd, DeterministicAndLayoutChecked) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  std::vector<double> v(20), gv(20);
  for (auto& x : v) x = d(rng);
  for (auto& x : gv) x = d(rng);
  ParamVector a = scalar_vector(v), b = scalar_vector(v);
  const ParamVector g = scalar_vector(gv);
  SgdState sa = SgdState::for_params(a, 0.9, 5e-4), sb = SgdState::for_params(b, 0.9, 5e-4);
  for (int i = 0; i < 5; ++i) {
    sgd_step(a, g, sa, 0.1);
    sgd_step(b, g, sb, 0.1);
  }
  EXPECT_EQ(a.values()[7], b.values()[7]);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_THROW(sgd_step(a, scalar_vector({1.0}), sa, 0.1), InputError);
}

TEST(Bootstrap, SwapCopiesAndZeroesMomentum) {
  ParamVector p = scalar_vector({1.0, 2.0});
  SgdState st = SgdState::for_params(p, 0.9, 0.0);
  sgd_step(p, scalar_vector({1.0, 1.0}), st, 0.1);
  ASSERT_NE(st.momentum_buffer[0], 0.0);
  const ParamVector ema = scalar_vector({0.25, -0.5});
  bootstrap_swap(p, ema, st);
  EXPECT_EQ(p, ema);
  EXPECT_EQ(st.momentum_buffer, std::vector<double>(2, 0.0));
}

TEST(Bootstrap, SelfSwapIsNoOp) {
  ParamVector p = scalar_vector({1.0, 2.0});
  const ParamVector copy = p;
  SgdState st = SgdState::for_params(p, 0.9, 0.0);
  st.momentum_buffer = {3.0, 4.0};
  bootstrap_swap(p, copy, st);
  EXPECT_EQ(p, copy);
  EXPECT_EQ(st.momentum_buffer, std::vector<double>(2, 0.0));
  st.momentum_buffer = {3.0, 4.0};
  bootstrap_swap(p, copy, st, true);
  EXPECT_EQ(st.momentum_buffer, (std::vector<double>{3.0, 4.0}));
  EXPECT_THROW(bootstrap_swap(p, scalar_vector({1.0}), st), InputError);
}
