#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dnat/config.hpp"
#include "dnat/diffusion.hpp"
#include "dnat/error.hpp"
#include "dnat/model.hpp"
#include "dnat/parallel.hpp"
#include "dnat/rng.hpp"
#include "dnat/trainer.hpp"
#include "dnat/vocab.hpp"

namespace dnat {

/// One visited step: the noisy input Y_t and the estimate made from it.
struct TraceStep {
  int t = 0;
  TokenSequence yt;
  TokenSequence y0_hat;
};

struct GenerationTrace {
  std::vector<TraceStep> steps;
};

struct EstimateOptions {
  int sp_turns = 2;
  double temperature = 0.0;
  /// Diffusion step fed to a time-conditioned model.
  int t = 0;
  /// Encoder output for the plain condition, reused across steps.
  const Memory* plain_memory = nullptr;
  /// When set, turn 0 is already prompted with this estimate.
  const TokenSequence* carried = nullptr;
  Rng* rng = nullptr;
};

/// Estimate of Y_0 from Y_t: a plain-conditioned pass followed by
/// `sp_turns` passes on [estimate; SEP; cond].
inline TokenSequence estimate_y0(const Denoiser& m, const TokenSequence& yt, const TokenSequence& cond,
                                 const EstimateOptions& opt = {}) {
  if (opt.sp_turns < 0) throw Error("self-prompting turns must be >= 0");
  if (opt.temperature > 0.0 && opt.rng == nullptr) throw Error("sampling needs an rng");
  const auto tt = time_input(m, opt.t);
  const int max_src = m.config().max_src_len;
  auto pick = [&](const LogitsGrid& g) {
    return opt.temperature > 0.0 ? g.sample(opt.temperature, *opt.rng) : g.argmax();
  };
  TokenSequence est;
  if (opt.carried != nullptr) {
    est = pick(decode(m, yt, encode(m, compose_prompt(*opt.carried, cond, max_src)), tt));
  } else if (opt.plain_memory != nullptr) {
    est = pick(decode(m, yt, *opt.plain_memory, tt));
  } else {
    est = pick(decode(m, yt, encode(m, cond), tt));
  }
  for (int k = 0; k < opt.sp_turns; ++k) {
    est = pick(decode(m, yt, encode(m, compose_prompt(est, cond, max_src)), tt));
  }
  return est;
}

inline TokenSequence estimate_y0(const Denoiser& m, const TokenSequence& yt, const TokenSequence& cond,
                                 int sp_turns) {
  EstimateOptions o;
  o.sp_turns = sp_turns;
  return estimate_y0(m, yt, cond, o);
}

/// Iterative denoising from all-[MASK] over make_step_plan(T, S). Between
/// plan steps the estimate is re-noised to the next step (or, in posterior
/// mode, masked positions are revealed from it). Returns the last estimate.
inline TokenSequence generate(const Denoiser& m, const TokenSequence& cond, const DiffusionProcess& dp,
                              const SampleConfig& sc, Rng& rng, GenerationTrace* trace = nullptr) {
  sc.validate();
  const int n = sc.length;
  if (n < 1) throw Error("generation length must be >= 1");
  if (n > m.config().max_tgt_len) throw Error("generation length exceeds max_tgt_len");
  const StepPlan plan = make_step_plan(dp.steps(), sc.steps);
  const Memory plain = encode(m, cond);

  TokenSequence y(static_cast<std::size_t>(n), dp.mask_id());
  TokenSequence est;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int t = plan.steps[i];
    EstimateOptions o;
    o.sp_turns = sc.sp_turns;
    o.temperature = sc.temperature;
    o.t = t;
    o.plain_memory = &plain;
    o.carried = sc.carry_prompt && i > 0 ? &est : nullptr;
    o.rng = &rng;
    TokenSequence next_est = estimate_y0(m, y, cond, o);
    est = std::move(next_est);
    if (trace) trace->steps.push_back({t, y, est});
    const int s = plan.next(i);
    if (s == 0) break;
    y = sc.mode == SamplerMode::posterior ? dp.posterior_step(y, est, t, s, rng) : dp.renoise(est, s, rng);
  }
  return est;
}

/// Generates for every condition with Rng(derive_seed(sc.seed, index)).
inline std::vector<TokenSequence> generate_batch(const Denoiser& m, const std::vector<TokenSequence>& conds,
                                                 const DiffusionProcess& dp, const SampleConfig& sc,
                                                 std::vector<GenerationTrace>* traces = nullptr) {
  std::vector<TokenSequence> out(conds.size());
  if (traces) traces->assign(conds.size(), GenerationTrace{});
  parallel_for(conds.size(), [&](std::size_t i) {
    Rng rng(derive_seed(sc.seed, i));
    out[i] = generate(m, conds[i], dp, sc, rng, traces ? &(*traces)[i] : nullptr);
  });
  return out;
}

}  // namespace dnat
