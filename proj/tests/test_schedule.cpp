#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dnat/error.hpp"
#include "dnat/schedule.hpp"

using namespace dnat;

TEST(LinearSchedule, RampAndDerivedMaskProbability) {
  const auto s = linear_schedule(4);
  const std::vector<double> want{1.0, 0.75, 0.5, 0.25, 0.0};
  ASSERT_EQ(s.alpha_bar.size(), want.size());
  for (std::size_t t = 0; t < want.size(); ++t) EXPECT_DOUBLE_EQ(s.alpha_bar[t], want[t]) << "t=" << t;
  // products of the per-step keep probabilities reproduce the ramp
  double prod = 1.0;
  for (int t = 1; t <= 4; ++t) {
    prod *= s.keep(t);
    EXPECT_NEAR(prod, want[static_cast<std::size_t>(t)], 1e-15);
  }
  EXPECT_NEAR(s.to_mask(2), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(s.to_mask(4), 1.0);
}

TEST(LinearSchedule, SingleStepMasksEverything) {
  const auto s = linear_schedule(1);
  EXPECT_EQ(s.alpha_bar, (std::vector<double>{1.0, 0.0}));
  EXPECT_EQ(s.to_mask(1), 1.0);
}

TEST(Schedules, ZeroStepsIsAnError) {
  EXPECT_THROW(linear_schedule(0), Error);
  EXPECT_THROW(cosine_schedule(0), Error);
}

TEST(CosineSchedule, MatchesClosedForm) {
  const int T = 10;
  const double s = 0.008;
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const auto sched = cosine_schedule(T, s);
  EXPECT_EQ(sched.alpha_bar[0], 1.0);
  for (int t = 1; t < T; ++t) EXPECT_NEAR(sched.alpha_bar[static_cast<std::size_t>(t)], f(t) / f(0), 1e-15);
  EXPECT_LE(f(T) / f(0), 1e-12);
  EXPECT_EQ(sched.alpha_bar[T], 0.0);
}

TEST(Schedules, InvariantsHoldForBothKinds) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int T : {1, 2, 3, 7, 100, 1000}) {
      const auto s = make_schedule(kind, T);
      EXPECT_EQ(s.alpha_bar.front(), 1.0);
      EXPECT_EQ(s.alpha_bar.back(), 0.0);
      for (int t = 1; t <= T; ++t) {
        const auto i = static_cast<std::size_t>(t);
        EXPECT_LE(s.alpha_bar[i], s.alpha_bar[i - 1]);
        EXPECT_NEAR(s.alpha_bar[i], s.alpha_bar[i - 1] * s.keep(t), 1e-12);
        EXPECT_DOUBLE_EQ(s.keep(t) + s.to_mask(t), 1.0);
        EXPECT_EQ(s.beta(t), 0.0);
        EXPECT_GE(s.keep(t), 0.0);
        EXPECT_GE(s.to_mask(t), 0.0);
      }
    }
  }
}

TEST(Schedules, UniformNoiseSplitsTheResidual) {
  const auto s = linear_schedule(5, 0.2);
  for (int t = 1; t <= 5; ++t) {
    EXPECT_NEAR(s.keep(t) + s.to_mask(t) + s.beta(t), 1.0, 1e-15);
    EXPECT_NEAR(s.beta(t), 0.2 * (1.0 - s.keep(t)), 1e-15);
  }
  EXPECT_THROW(linear_schedule(5, 1.0), Error);
  EXPECT_THROW(linear_schedule(5, -0.1), Error);
}

TEST(Schedules, ParseKind) {
  EXPECT_EQ(parse_schedule_kind("linear"), ScheduleKind::linear);
  EXPECT_EQ(parse_schedule_kind("cosine"), ScheduleKind::cosine);
  EXPECT_THROW(parse_schedule_kind("sqrt"), UsageError);
  EXPECT_EQ(to_string(ScheduleKind::cosine), "cosine");
}
