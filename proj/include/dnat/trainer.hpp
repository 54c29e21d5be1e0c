#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dnat/checkpoint.hpp"
#include "dnat/config.hpp"
#include "dnat/data.hpp"
#include "dnat/diffusion.hpp"
#include "dnat/error.hpp"
#include "dnat/model.hpp"
#include "dnat/optim.hpp"
#include "dnat/parallel.hpp"
#include "dnat/rng.hpp"
#include "dnat/vocab.hpp"

namespace dnat {

/// A (condition, clean target) pair, both already encoded and padded.
struct TrainExample {
  TokenSequence condition;
  TokenSequence target;
};

/// Condition for a self-prompted pass: [y0_hat; SEP; cond], with trailing
/// [PAD]s of cond dropped and the result cut to max_src_len from the end.
inline TokenSequence compose_prompt(const TokenSequence& y0_hat, const TokenSequence& cond,
                                    int max_src_len) {
  if (y0_hat.size() > static_cast<std::size_t>(max_src_len)) {
    throw Error("estimate is longer than max_src_len");
  }
  std::size_t cond_len = cond.size();
  while (cond_len > 0 && cond[cond_len - 1] == Vocabulary::kPadId) --cond_len;
  TokenSequence out;
  out.ids.reserve(y0_hat.size() + 1 + cond_len);
  out.ids.insert(out.ids.end(), y0_hat.begin(), y0_hat.end());
  out.ids.push_back(Vocabulary::kSepId);
  out.ids.insert(out.ids.end(), cond.begin(), cond.begin() + static_cast<std::ptrdiff_t>(cond_len));
  if (out.size() > static_cast<std::size_t>(max_src_len)) out.ids.resize(static_cast<std::size_t>(max_src_len));
  return out;
}

inline std::optional<int> time_input(const Denoiser& m, int t) {
  return m.config().time_embedding ? std::optional<int>(t) : std::nullopt;
}

/// Loss of one example with its own randomness: draws t, corrupts the
/// target and, with probability self_prompt_prob, conditions on a detached
/// greedy first-pass estimate.
inline LossAndGradients example_loss(const Denoiser& model, const TrainExample& ex, const TrainConfig& cfg,
                                     const DiffusionProcess& dp, Rng& rng) {
  const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(dp.steps())));
  const TokenSequence yt = dp.forward_sample(ex.target, t, rng);
  const bool prompted = rng.bernoulli(cfg.self_prompt_prob);
  const auto tt = time_input(model, t);
  TokenSequence cond = ex.condition;
  if (prompted) {
    const TokenSequence first = decode(model, yt, encode(model, ex.condition), tt).argmax();
    cond = compose_prompt(first, ex.condition, model.config().max_src_len);
  }
  LossOptions opts;
  opts.masked_only = cfg.loss_on_masked_only;
  opts.dropout_rng = model.config().dropout > 0.0 ? &rng : nullptr;
  return loss_and_gradients(model, cond, yt, ex.target, tt, opts);
}

/// Mean loss and gradient over a batch. One seed per example is drawn from
/// `rng` up front; examples run in parallel and are summed in batch order.
inline LossAndGradients batch_gradients(const Denoiser& model, std::span<const TrainExample> batch,
                                        const TrainConfig& cfg, const DiffusionProcess& dp, Rng& rng) {
  if (batch.empty()) throw Error("empty batch");
  const std::size_t n = batch.front().target.size();
  for (const auto& ex : batch) {
    if (ex.target.size() != n) throw Error("mixed target lengths in batch");
    if (ex.target.contains(Vocabulary::kMaskId)) throw Error("target contains mask");
  }
  std::vector<std::uint64_t> seeds(batch.size());
  for (auto& s : seeds) s = rng.next_u64();

  LossAndGradients total;
  total.grads = Gradients::zeros_like(model);
  constexpr std::size_t kChunk = 16;
  std::vector<LossAndGradients> parts;
  for (std::size_t begin = 0; begin < batch.size(); begin += kChunk) {
    const std::size_t len = std::min(kChunk, batch.size() - begin);
    parts.assign(len, LossAndGradients{});
    parallel_for(len, [&](std::size_t i) {
      Rng r(seeds[begin + i]);
      parts[i] = example_loss(model, batch[begin + i], cfg, dp, r);
    });
    for (const auto& p : parts) {
      total.loss += p.loss;
      total.grads.add(p.grads);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total.loss *= inv;
  total.grads.scale(inv);
  return total;
}

inline AdamOptions adam_options(const TrainConfig& cfg) {
  AdamOptions o;
  o.lr = cfg.lr;
  o.weight_decay = cfg.weight_decay;
  return o;
}

/// One optimizer update on a batch; returns the batch loss before the update.
inline double train_step(Denoiser& model, AdamState& opt, std::span<const TrainExample> batch,
                         const TrainConfig& cfg, const DiffusionProcess& dp, Rng& rng) {
  const LossAndGradients lg = batch_gradients(model, batch, cfg, dp, rng);
  adamw_step(model, lg.grads, opt, adam_options(cfg));
  return lg.loss;
}

/// Encoded splits and the vocabulary built from the training split.
struct TrainingData {
  Vocabulary vocab;
  int source_len = 0;
  int target_len = 0;
  std::vector<TrainExample> train;
  std::vector<TrainExample> valid;
  std::vector<TrainExample> test;
  /// Raw test pairs, aligned with `test`.
  std::vector<std::pair<std::string, std::string>> test_pairs;
};

namespace detail {

inline int longest(const ParallelCorpus& c, bool source) {
  std::size_t n = 0;
  for (const auto& [s, t] : c.pairs) n = std::max(n, split_whitespace(source ? s : t).size());
  return static_cast<int>(n);
}

}  // namespace detail

/// Builds the vocabulary and encodes every split. When `vocab` is given it
/// is reused instead of built.
inline TrainingData prepare_data(const ParallelCorpus& corpus, const DataConfig& dc, const ModelConfig& mc,
                                 std::optional<Vocabulary> vocab = std::nullopt) {
  if (corpus.pairs.empty()) throw Error("empty corpus");
  if (corpus.train.empty()) throw Error("corpus has no training pairs");
  auto build = [&] {
    std::vector<std::string> lines;
    for (auto i : corpus.train) {
      lines.push_back(corpus.pairs[i].first);
      lines.push_back(corpus.pairs[i].second);
    }
    return build_vocabulary(lines, dc.min_count);
  };
  TrainingData d{vocab ? *vocab : build()};
  d.source_len = dc.source_len > 0 ? dc.source_len : std::min(detail::longest(corpus, true), mc.max_src_len);
  d.target_len = dc.target_len > 0 ? dc.target_len : std::min(detail::longest(corpus, false), mc.max_tgt_len);
  d.source_len = std::max(d.source_len, 1);
  d.target_len = std::max(d.target_len, 1);
  if (d.source_len > mc.max_src_len) throw Error("data.source_len exceeds model.max_src_len");
  if (d.target_len > mc.max_tgt_len) throw Error("data.target_len exceeds model.max_tgt_len");
  auto encode_split = [&](const std::vector<std::size_t>& idx, std::vector<TrainExample>& out) {
    out.reserve(idx.size());
    for (auto i : idx) {
      const auto& [s, t] = corpus.pairs[i];
      out.push_back({encode(d.vocab, s, static_cast<std::size_t>(d.source_len)),
                     encode(d.vocab, t, static_cast<std::size_t>(d.target_len))});
    }
  };
  encode_split(corpus.train, d.train);
  encode_split(corpus.valid, d.valid);
  encode_split(corpus.test, d.test);
  for (auto i : corpus.test) d.test_pairs.push_back(corpus.pairs[i]);
  return d;
}

/// Corpus named by the data section: a TSV path or a synthetic spec.
inline ParallelCorpus load_corpus(const DataConfig& dc) {
  if (!dc.corpus.empty() && !dc.synthetic.empty()) {
    throw UsageError("data.corpus and data.synthetic are mutually exclusive");
  }
  if (!dc.synthetic.empty()) return generate_synthetic(parse_synthetic_spec(dc.synthetic));
  if (!dc.corpus.empty()) return load_tsv(dc.corpus);
  throw UsageError("no training data: set data.corpus or data.synthetic");
}

inline DiffusionProcess make_process(const TrainConfig& cfg, const Vocabulary& vocab) {
  return DiffusionProcess(make_schedule(cfg.schedule, cfg.diffusion_steps, cfg.uniform_noise), vocab);
}

/// Fresh checkpoint at step 0. The model seed is derived from train.seed.
inline Checkpoint initial_checkpoint(const TrainingData& data, const RunConfig& rc) {
  ModelConfig mc = rc.model;
  mc.vocab_size = static_cast<int>(data.vocab.size());
  mc.time_steps = mc.time_embedding ? rc.train.diffusion_steps : 0;
  Denoiser model = init_denoiser(mc, derive_seed(rc.train.seed, 0x1417));
  AdamState opt = AdamState::zeros_like(model);
  return Checkpoint{data.vocab, std::move(model), rc.train, rc.sample, data.source_len, data.target_len, 0,
                    std::move(opt)};
}

struct TrainOptions {
  /// Directory for checkpoint.dnat, loss.csv, vocab.txt and config.json;
  /// empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Called after every step with (step, loss).
  std::function<void(long, double)> on_step;
};

namespace detail {

inline std::string format_loss(long step, double loss) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%ld,%.6f", step, loss);
  return buf;
}

/// Loss log lines for steps <= `upto` from an earlier run, if present.
inline std::vector<std::string> previous_log(const std::filesystem::path& path, long upto) {
  std::vector<std::string> lines;
  std::ifstream in(path);
  if (!in) return lines;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stol(line.substr(0, comma)) <= upto) lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

/// Runs updates start.step+1 .. rc.train.total_steps; every other training
/// setting comes from `start`. Each step's batch and
/// noise come from Rng(derive_seed(seed, step)), so an interrupted and
/// resumed run matches an uninterrupted one bit for bit.
inline Checkpoint train(const TrainingData& data, const RunConfig& rc, Checkpoint start,
                        const TrainOptions& opts = {}) {
  start.train.total_steps = rc.train.total_steps;
  const TrainConfig& cfg = start.train;
  if (data.train.empty()) throw Error("empty corpus");
  if (!(data.vocab == start.vocab)) throw Error("training data vocabulary differs from the checkpoint");
  if (!start.optimizer) start.optimizer = AdamState::zeros_like(start.model);
  const DiffusionProcess dp = make_process(cfg, start.vocab);

  std::ofstream log;
  const bool to_disk = !opts.out_dir.empty();
  if (to_disk) {
    std::filesystem::create_directories(opts.out_dir);
    const auto log_path = opts.out_dir / "loss.csv";
    const auto kept = detail::previous_log(log_path, start.step);
    log.open(log_path, std::ios::trunc);
    if (!log) throw Error("cannot write " + log_path.string());
    log << "step,loss\n";
    for (const auto& l : kept) log << l << '\n';
    start.vocab.save(opts.out_dir / "vocab.txt");
    std::ofstream cfg_out(opts.out_dir / "config.json", std::ios::trunc);
    if (!cfg_out) throw Error("cannot write " + (opts.out_dir / "config.json").string());
    RunConfig effective = rc;
    effective.train = cfg;
    cfg_out << to_json(effective).dump(2) << '\n';
  }
  auto save = [&] {
    if (to_disk) save_checkpoint(start, opts.out_dir / "checkpoint.dnat");
  };

  std::vector<TrainExample> batch(static_cast<std::size_t>(cfg.batch_size));
  for (long step = start.step + 1; step <= cfg.total_steps; ++step) {
    Rng rng(derive_seed(cfg.seed, 0x7a1e, static_cast<std::uint64_t>(step)));
    for (auto& ex : batch) ex = data.train[rng.below(data.train.size())];
    const double loss = train_step(start.model, *start.optimizer, batch, cfg, dp, rng);
    if (!std::isfinite(loss)) throw Error("loss became non-finite at step " + std::to_string(step));
    start.step = step;
    if (to_disk) {
      log << detail::format_loss(step, loss) << '\n';
      if (!log) throw Error("failed writing " + (opts.out_dir / "loss.csv").string());
    }
    if (opts.on_step) opts.on_step(step, loss);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps) save();
  }
  save();
  return start;
}

/// Fresh run from data and config.
inline Checkpoint train(const TrainingData& data, const RunConfig& rc, const TrainOptions& opts = {}) {
  return train(data, rc, initial_checkpoint(data, rc), opts);
}

}  // namespace dnat
