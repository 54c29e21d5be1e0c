#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "dnat/error.hpp"
#include "dnat/rng.hpp"
#include "dnat/schedule.hpp"
#include "dnat/vocab.hpp"

namespace dnat {

/// Decreasing diffusion steps visited at inference, first element T.
/// Consecutive pairs (steps[i] -> steps[i + 1]) are the transitions; the
/// last element transitions to 0.
struct StepPlan {
  std::vector<int> steps;

  /// Step that follows position i in the plan (0 after the last one).
  int next(std::size_t i) const { return i + 1 < steps.size() ? steps[i + 1] : 0; }
  std::size_t size() const noexcept { return steps.size(); }
};

/// S evenly spaced steps round(T i / S), i = 1..S, in decreasing order.
inline StepPlan make_step_plan(int T, int S) {
  if (T < 1) throw Error("diffusion steps must be >= 1");
  if (S < 1 || S > T) throw Error("inference steps must satisfy 1 <= S <= T");
  StepPlan plan;
  plan.steps.reserve(static_cast<std::size_t>(S));
  for (int i = S; i >= 1; --i) {
    // round half up of T*i/S in integer arithmetic
    const auto num = 2LL * T * i + S;
    const int t = static_cast<int>(num / (2LL * S));
    if (plan.steps.empty() || plan.steps.back() != t) plan.steps.push_back(t);
  }
  return plan;
}

struct Marginal {
  double keep;
  double mask;
};

/// Categorical diffusion over K token states with an absorbing [MASK].
///
/// Transition matrices are never materialized on the default (uniform_noise
/// = 0) path: every quantity has a closed form in alpha_bar. The explicit
/// K x K matrices exist for the uniform-noise extension and for the oracles.
class DiffusionProcess {
 public:
  using Matrix = Eigen::MatrixXd;

  DiffusionProcess(NoiseSchedule schedule, const Vocabulary& vocab)
      : DiffusionProcess(std::move(schedule), static_cast<int>(vocab.size()), vocab.mask_id()) {}

  DiffusionProcess(NoiseSchedule schedule, int vocab_size, TokenId mask_id)
      : schedule_(std::move(schedule)), vocab_size_(vocab_size), mask_id_(mask_id) {
    if (schedule_.steps < 1) throw Error("diffusion steps must be >= 1");
    if (mask_id_ < 0 || mask_id_ >= vocab_size_) throw Error("mask id out of range");
    if (schedule_.uniform_noise > 0.0 && vocab_size_ < 3) {
      throw Error("uniform noise needs at least three token states");
    }
  }

  int steps() const noexcept { return schedule_.steps; }
  int vocab_size() const noexcept { return vocab_size_; }
  TokenId mask_id() const noexcept { return mask_id_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  bool pure_absorbing() const noexcept { return schedule_.uniform_noise == 0.0; }

  /// (alpha_bar_t, 1 - alpha_bar_t).
  Marginal forward_marginal(int t) const {
    check_step(t);
    const double keep = schedule_.cumulative_keep(t);
    return {keep, 1.0 - keep};
  }

  /// Draw from q(Y_t | Y_0), positions independently.
  TokenSequence forward_sample(const TokenSequence& y0, int t, Rng& rng) const {
    check_step(t);
    TokenSequence out = y0;
    if (pure_absorbing()) {
      const double keep = schedule_.cumulative_keep(t);
      for (auto& id : out.ids) {
        if (!rng.bernoulli(keep)) id = mask_id_;
      }
      return out;
    }
    const Matrix qbar = cumulative_matrix(t);
    for (auto& id : out.ids) id = sample_row(qbar, id, rng);
    return out;
  }

  /// Draw from q(Y_t | Y0_hat); same law as forward_sample but the estimate
  /// must be mask-free.
  TokenSequence renoise(const TokenSequence& y0_hat, int t_target, Rng& rng) const {
    check_step(t_target);
    if (y0_hat.contains(mask_id_)) throw Error("estimate contains mask");
    return forward_sample(y0_hat, t_target, rng);
  }

  /// q(x_{t-1} | x_t, x_0) as a length-K probability vector.
  std::vector<double> posterior(TokenId xt, TokenId x0, int t) const {
    if (t < 1 || t > steps()) throw Error("step out of range");
    check_token(xt);
    check_token(x0);
    if (x0 == mask_id_) throw Error("x0 must be clean");
    std::vector<double> p(static_cast<std::size_t>(vocab_size_), 0.0);
    if (pure_absorbing()) {
      if (xt != mask_id_) {
        p[static_cast<std::size_t>(xt)] = 1.0;
        return p;
      }
      const double to_clean = unmask_probability(t, t - 1);
      p[static_cast<std::size_t>(x0)] = to_clean;
      p[static_cast<std::size_t>(mask_id_)] = 1.0 - to_clean;
      return p;
    }
    // Bayes with explicit matrices:
    // q(x_{t-1}=j | x_t, x_0) = Q_t[j, x_t] Qbar_{t-1}[x_0, j] / Qbar_t[x_0, x_t]
    const Matrix q = transition_matrix(t);
    const Matrix prev = cumulative_matrix(t - 1);
    const Matrix cur = prev * q;
    const double denom = cur(x0, xt);
    if (denom <= 0.0) {
      // unreachable state; fall back to keeping x_t
      p[static_cast<std::size_t>(xt)] = 1.0;
      return p;
    }
    for (int j = 0; j < vocab_size_; ++j) {
      p[static_cast<std::size_t>(j)] = q(j, xt) * prev(x0, j) / denom;
    }
    return p;
  }

  /// P(x_s = x_0 | x_t = [MASK], x_0) for s < t on the absorbing chain:
  /// (alpha_bar_s - alpha_bar_t) / (1 - alpha_bar_t). With s = t - 1 this is
  /// gamma_t alpha_bar_{t-1} / (1 - alpha_bar_t).
  double unmask_probability(int t, int s) const {
    check_step(t);
    check_step(s);
    const double ab_t = schedule_.cumulative_keep(t);
    const double ab_s = schedule_.cumulative_keep(s);
    if (1.0 - ab_t <= 0.0) return 1.0;
    if (s == t - 1) return schedule_.to_mask(t) * ab_s / (1.0 - ab_t);
    return (ab_s - ab_t) / (1.0 - ab_t);
  }

  /// Posterior-mode transition from step t to step s < t using an estimate:
  /// clean positions of Y_t are kept, masked ones are revealed from y0_hat
  /// with probability unmask_probability(t, s).
  TokenSequence posterior_step(const TokenSequence& yt, const TokenSequence& y0_hat, int t, int s,
                               Rng& rng) const {
    if (s >= t) throw Error("posterior step must move backwards in time");
    if (yt.size() != y0_hat.size()) throw Error("length mismatch");
    if (y0_hat.contains(mask_id_)) throw Error("estimate contains mask");
    const double reveal = unmask_probability(t, s);
    TokenSequence out = yt;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] == mask_id_ && rng.bernoulli(reveal)) out[i] = y0_hat[i];
    }
    return out;
  }

  /// Q_t with [Q_t]_{i,j} = P(token i becomes token j at step t).
  Matrix transition_matrix(int t) const {
    check_step(t);
    const int K = vocab_size_;
    Matrix q = Matrix::Zero(K, K);
    if (t == 0) return Matrix::Identity(K, K);
    const double a = schedule_.keep(t);
    const double g = schedule_.to_mask(t);
    const double other = pure_absorbing() ? 0.0 : schedule_.beta(t) / (K - 2);
    for (int i = 0; i < K; ++i) {
      if (i == mask_id_) {
        q(i, i) = 1.0;
        continue;
      }
      for (int j = 0; j < K; ++j) q(i, j) = other;
      q(i, i) = a;
      q(i, mask_id_) = g;
    }
    return q;
  }

  /// Qbar_t = Q_1 Q_2 ... Q_t.
  Matrix cumulative_matrix(int t) const {
    check_step(t);
    Matrix acc = Matrix::Identity(vocab_size_, vocab_size_);
    for (int s = 1; s <= t; ++s) acc = acc * transition_matrix(s);
    return acc;
  }

 private:
  void check_step(int t) const {
    if (t < 0 || t > steps()) throw Error("step out of range");
  }
  void check_token(TokenId id) const {
    if (id < 0 || id >= vocab_size_) throw Error("id out of range");
  }

  TokenId sample_row(const Matrix& m, TokenId from, Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int j = 0; j < vocab_size_; ++j) {
      acc += m(from, j);
      if (u < acc) return j;
    }
    return mask_id_;
  }

  NoiseSchedule schedule_;
  int vocab_size_;
  TokenId mask_id_;
};

}  // namespace dnat
