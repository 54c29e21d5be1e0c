#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "dnat/error.hpp"

namespace dnat {

enum class ScheduleKind { linear, cosine };

inline std::string_view to_string(ScheduleKind k) {
  return k == ScheduleKind::linear ? "linear" : "cosine";
}

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw UsageError("unknown schedule '" + std::string(s) + "' (expected linear or cosine)");
}

/// Per-step keep/mask probabilities of the absorbing chain.
///
/// Vectors are indexed by step and have T + 1 entries; index 0 is the
/// identity step (alpha = 1, gamma = 0). With uniform_noise = u the non-keep
/// mass 1 - alpha_t is split into gamma_t = (1 - u)(1 - alpha_t) towards
/// [MASK] and beta_t = u (1 - alpha_t) spread over the other tokens.
/// alpha_bar holds the closed-form cumulative keep probability (the
/// probability of never having left the clean token); alpha_t is derived as
/// alpha_bar_t / alpha_bar_{t-1}, so the two agree up to rounding.
struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::linear;
  std::vector<double> alpha;
  std::vector<double> gamma;
  std::vector<double> alpha_bar;
  double uniform_noise = 0.0;

  double beta(int t) const { return uniform_noise * (1.0 - alpha[static_cast<std::size_t>(t)]); }

  double keep(int t) const { return alpha[static_cast<std::size_t>(t)]; }
  double to_mask(int t) const { return gamma[static_cast<std::size_t>(t)]; }
  double cumulative_keep(int t) const { return alpha_bar[static_cast<std::size_t>(t)]; }
};

namespace detail {

inline NoiseSchedule schedule_from_alpha_bar(ScheduleKind kind, std::vector<double> alpha_bar,
                                             double uniform_noise) {
  if (uniform_noise < 0.0 || uniform_noise >= 1.0) {
    throw Error("uniform_noise must lie in [0, 1)");
  }
  const int T = static_cast<int>(alpha_bar.size()) - 1;
  NoiseSchedule s;
  s.steps = T;
  s.kind = kind;
  s.uniform_noise = uniform_noise;
  s.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.gamma.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    const double a = alpha_bar[i - 1] > 0.0 ? alpha_bar[i] / alpha_bar[i - 1] : 0.0;
    s.alpha[i] = a;
    s.gamma[i] = (1.0 - uniform_noise) * (1.0 - a);
  }
  alpha_bar[static_cast<std::size_t>(T)] = 0.0;
  s.alpha_bar = std::move(alpha_bar);
  return s;
}

}  // namespace detail

/// alpha_bar_t = 1 - t/T; the final step masks everything still clean.
inline NoiseSchedule linear_schedule(int T, double uniform_noise = 0.0) {
  if (T < 1) throw Error("diffusion steps must be >= 1");
  std::vector<double> ab(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) {
    ab[static_cast<std::size_t>(t)] = static_cast<double>(T - t) / static_cast<double>(T);
  }
  auto s = detail::schedule_from_alpha_bar(ScheduleKind::linear, std::move(ab), uniform_noise);
  s.alpha[static_cast<std::size_t>(T)] = 0.0;
  s.gamma[static_cast<std::size_t>(T)] = 1.0 - uniform_noise;
  return s;
}

/// Unclamped cosine cumulative keep probability f(t)/f(0).
inline double cosine_alpha_bar(int t, int T, double offset) {
  const auto f = [&](double x) {
    const double c = std::cos((x / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  return f(static_cast<double>(t)) / f(0.0);
}

/// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2); final value clamped to 0.
inline NoiseSchedule cosine_schedule(int T, double offset = 0.008, double uniform_noise = 0.0) {
  if (T < 1) throw Error("diffusion steps must be >= 1");
  if (!(offset > 0.0)) throw Error("cosine offset must be positive");
  std::vector<double> ab(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) ab[static_cast<std::size_t>(t)] = cosine_alpha_bar(t, T, offset);
  ab[0] = 1.0;
  ab[static_cast<std::size_t>(T)] = 0.0;
  auto s = detail::schedule_from_alpha_bar(ScheduleKind::cosine, std::move(ab), uniform_noise);
  s.alpha[static_cast<std::size_t>(T)] = 0.0;
  s.gamma[static_cast<std::size_t>(T)] = 1.0 - uniform_noise;
  return s;
}

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double uniform_noise = 0.0) {
  return kind == ScheduleKind::linear ? linear_schedule(T, uniform_noise)
                                      : cosine_schedule(T, 0.008, uniform_noise);
}

}  // namespace dnat
