#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dnat/diffusion.hpp"
#include "dnat/model.hpp"
#include "dnat/rng.hpp"
#include "dnat/schedule.hpp"

namespace dnat::verify {

/// q(x_t = j | x_0) for every j, summing the probability of every path
/// x_0 -> x_1 -> ... -> x_t through the single-step matrices.
inline std::vector<double> path_marginal(const DiffusionProcess& dp, TokenId x0, int t) {
  const int K = dp.vocab_size();
  std::vector<Eigen::MatrixXd> q;
  for (int s = 1; s <= t; ++s) q.push_back(dp.transition_matrix(s));
  std::vector<double> out(static_cast<std::size_t>(K), 0.0);
  std::function<void(int, TokenId, double)> walk = [&](int depth, TokenId state, double p) {
    if (depth == t) {
      out[static_cast<std::size_t>(state)] += p;
      return;
    }
    const auto& m = q[static_cast<std::size_t>(depth)];
    for (int j = 0; j < K; ++j) {
      if (m(state, j) != 0.0) walk(depth + 1, j, p * m(state, j));
    }
  };
  walk(0, x0, 1.0);
  return out;
}

/// Largest violation of sum_{x_t} q(x_{t-1} | x_t, x_0) q(x_t | x_0) = q(x_{t-1} | x_0)
/// over all clean x_0, all t and all x_{t-1}, with both marginals taken from
/// path enumeration.
inline double chapman_kolmogorov_error(const DiffusionProcess& dp) {
  const int K = dp.vocab_size();
  double worst = 0.0;
  for (TokenId x0 = 0; x0 < K; ++x0) {
    if (x0 == dp.mask_id()) continue;
    std::vector<double> prev = path_marginal(dp, x0, 0);
    for (int t = 1; t <= dp.steps(); ++t) {
      const std::vector<double> cur = path_marginal(dp, x0, t);
      std::vector<double> lhs(static_cast<std::size_t>(K), 0.0);
      for (TokenId xt = 0; xt < K; ++xt) {
        const double w = cur[static_cast<std::size_t>(xt)];
        if (w == 0.0) continue;
        const auto post = dp.posterior(xt, x0, t);
        for (int j = 0; j < K; ++j) lhs[static_cast<std::size_t>(j)] += post[static_cast<std::size_t>(j)] * w;
      }
      for (int j = 0; j < K; ++j) {
        const double e = std::abs(lhs[static_cast<std::size_t>(j)] - prev[static_cast<std::size_t>(j)]);
        if (!(e <= worst)) worst = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
      }
      prev = cur;
    }
  }
  return worst;
}

/// Largest |row sum - 1| (or negative entry magnitude) over Q_t, Qbar_t and
/// the posterior rows of reachable states.
inline double row_stochastic_error(const DiffusionProcess& dp) {
  const int K = dp.vocab_size();
  double worst = 0.0;
  auto check_rows = [&](const Eigen::MatrixXd& m) {
    for (int i = 0; i < K; ++i) {
      worst = std::max(worst, std::abs(m.row(i).sum() - 1.0));
      worst = std::max(worst, -std::min(0.0, m.row(i).minCoeff()));
    }
  };
  for (int t = 0; t <= dp.steps(); ++t) {
    check_rows(dp.transition_matrix(t));
    check_rows(dp.cumulative_matrix(t));
  }
  for (TokenId x0 = 0; x0 < K; ++x0) {
    if (x0 == dp.mask_id()) continue;
    for (int t = 1; t <= dp.steps(); ++t) {
      const auto reach = path_marginal(dp, x0, t);
      for (TokenId xt = 0; xt < K; ++xt) {
        if (reach[static_cast<std::size_t>(xt)] == 0.0) continue;
        const auto p = dp.posterior(xt, x0, t);
        double s = 0.0;
        for (double v : p) {
          s += v;
          worst = std::max(worst, -std::min(0.0, v));
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
  }
  return worst;
}

/// Largest deviation among: alpha_bar_0 = 1, alpha_bar_T = 0,
/// alpha_bar_t = prod alpha_s, alpha_bar non-increasing, and
/// alpha_t + gamma_t + beta_t = 1 with every term in [0, 1].
inline double schedule_consistency_error(const NoiseSchedule& s) {
  const int T = s.steps;
  const auto n = static_cast<std::size_t>(T) + 1;
  if (T < 1 || s.alpha.size() != n || s.gamma.size() != n || s.alpha_bar.size() != n) {
    return std::numeric_limits<double>::infinity();
  }
  double worst = std::abs(s.alpha_bar[0] - 1.0);
  worst = std::max(worst, std::abs(s.alpha_bar[n - 1]));
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    prod *= s.alpha[i];
    worst = std::max(worst, std::abs(s.alpha_bar[i] - prod));
    worst = std::max(worst, std::max(0.0, s.alpha_bar[i] - s.alpha_bar[i - 1]));
    const double a = s.keep(t), g = s.to_mask(t), b = s.beta(t);
    worst = std::max(worst, std::abs(a + g + b - 1.0));
    for (double v : {a, g, b}) worst = std::max(worst, std::max(-v, v - 1.0));
  }
  return worst;
}

struct GroupError {
  std::string name;
  double error = 0.0;
};

struct GradientCheckResult {
  std::vector<GroupError> groups;
  double max_error = 0.0;
  std::size_t entries = 0;
};

/// Tiny denoiser with every tensor randomized, including norm parameters
/// and the time table.
inline Denoiser gradient_check_model(std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.max_src_len = 6;
  c.max_tgt_len = 4;
  c.vocab_size = 7;
  c.time_embedding = true;
  c.time_steps = 3;
  Denoiser m = init_denoiser(c, seed);
  Rng rng(derive_seed(seed, 0x9c));
  for (std::size_t i = 0; i < m.num_tensors(); ++i) {
    auto& t = m.tensor(i);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = 0.5 * rng.normal();
  }
  return m;
}

/// Central differences against the tape gradient of the reconstruction
/// loss. Per entry the error is |a - n| / max(|a|, |n|, floor); the floor
/// keeps gradients that are identically zero (attention key biases) from
/// dividing rounding noise by noise.
inline GradientCheckResult gradient_check(std::uint64_t seed = 1, double eps = 1e-4, double floor = 1e-6) {
  Denoiser m = gradient_check_model(seed);
  const TokenSequence cond{5, 4, 6, 3, 0};
  const TokenSequence yt{1, 6, 1, 0};
  const TokenSequence y0{4, 6, 5, 0};
  const int t = 2;
  const auto analytic = loss_and_gradients(m, cond, yt, y0, t).grads;
  GradientCheckResult r;
  for (std::size_t i = 0; i < m.num_tensors(); ++i) {
    ad::Matrix& p = m.tensor(i);
    const ad::Matrix& g = analytic.tensors[i];
    double err = 0.0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double orig = p.data()[k];
      p.data()[k] = orig + eps;
      const double up = loss_and_gradients(m, cond, yt, y0, t).loss;
      p.data()[k] = orig - eps;
      const double down = loss_and_gradients(m, cond, yt, y0, t).loss;
      p.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g.data()[k];
      const double e = std::abs(numeric - a) / std::max({std::abs(numeric), std::abs(a), floor});
      err = std::isnan(e) ? std::numeric_limits<double>::infinity() : std::max(err, e);
      ++r.entries;
    }
    r.groups.push_back({m.name(i), err});
    r.max_error = std::max(r.max_error, err);
  }
  return r;
}

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool ok() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

/// Every (schedule kind, T <= 5, K <= 5, uniform noise) combination the
/// enumeration oracles cover.
inline std::vector<DiffusionProcess> small_processes() {
  std::vector<DiffusionProcess> out;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int T = 1; T <= 5; ++T) {
      for (int K = 2; K <= 5; ++K) {
        for (double u : {0.0, 0.1}) {
          if (u > 0.0 && K < 3) continue;
          out.emplace_back(make_schedule(kind, T, u), K, TokenId{1});
        }
      }
    }
  }
  return out;
}

inline std::string describe(const DiffusionProcess& dp) {
  std::ostringstream s;
  s << to_string(dp.schedule().kind) << " T=" << dp.steps() << " K=" << dp.vocab_size()
    << " u=" << dp.schedule().uniform_noise;
  return s.str();
}

namespace detail {

template <typename Fn>
CheckResult timed(std::string name, Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult r = fn();
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline std::string sci(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

/// Worst value of `metric` over the small processes, compared to `tol`.
template <typename Metric>
CheckResult worst_over_processes(Metric&& metric, double tol) {
  double worst = 0.0;
  std::string where;
  const auto procs = small_processes();
  for (const auto& dp : procs) {
    const double e = metric(dp);
    if (!(e <= worst)) {
      worst = e;
      where = describe(dp);
    }
  }
  CheckResult r;
  r.passed = worst <= tol;
  r.detail = std::to_string(procs.size()) + " chains, max error " + sci(worst) + (where.empty() ? "" : " at " + where);
  return r;
}

}  // namespace detail

inline VerifyReport run_verify() {
  VerifyReport rep;
  rep.checks.push_back(detail::timed("chapman-kolmogorov", [] {
    return detail::worst_over_processes([](const DiffusionProcess& dp) { return chapman_kolmogorov_error(dp); },
                                        1e-12);
  }));
  rep.checks.push_back(detail::timed("row-stochastic", [] {
    return detail::worst_over_processes([](const DiffusionProcess& dp) { return row_stochastic_error(dp); },
                                        1e-12);
  }));
  rep.checks.push_back(detail::timed("schedule-consistency", [] {
    double worst = 0.0;
    std::string where;
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
      for (int T : {1, 2, 5, 10, 100, 1000}) {
        const double e = schedule_consistency_error(make_schedule(kind, T));
        if (!(e <= worst)) {
          worst = e;
          where = std::string(to_string(kind)) + " T=" + std::to_string(T);
        }
      }
    }
    CheckResult r;
    r.passed = worst <= 1e-12;
    r.detail = "max error " + detail::sci(worst) + (where.empty() ? "" : " at " + where);
    return r;
  }));
  rep.checks.push_back(detail::timed("gradient-finite-difference", [] {
    const auto g = gradient_check();
    CheckResult r;
    r.passed = g.max_error < 1e-4;
    std::string worst_name;
    double worst = -1.0;
    for (const auto& e : g.groups) {
      if (e.error > worst) {
        worst = e.error;
        worst_name = e.name;
      }
    }
    r.detail = std::to_string(g.groups.size()) + " groups, " + std::to_string(g.entries) +
               " entries, max relative error " + detail::sci(g.max_error) + " (" + worst_name + ")";
    return r;
  }));
  return rep;
}

}  // namespace dnat::verify
