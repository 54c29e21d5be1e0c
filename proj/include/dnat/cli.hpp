#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dnat/checkpoint.hpp"
#include "dnat/config.hpp"
#include "dnat/data.hpp"
#include "dnat/diffusion.hpp"
#include "dnat/error.hpp"
#include "dnat/metrics.hpp"
#include "dnat/sampler.hpp"
#include "dnat/trainer.hpp"
#include "dnat/verify.hpp"

namespace dnat::cli {

struct TrainArgs {
  std::string corpus;
  std::string synthetic;
  std::string config;
  std::string out;
  std::string resume;
  bool print_config = false;
  bool quiet = false;
  std::optional<long> steps;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

struct GenerateArgs {
  std::string checkpoint;
  std::string input;
  std::optional<int> steps;
  std::optional<int> sp_turns;
  std::optional<int> length;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<double> temperature;
  bool carry_prompt = false;
  std::string trace;
};

struct EvaluateArgs {
  std::string hyp;
  std::string ref;
  std::string metrics = "bleu1,bleu2,distinct1,distinct2,rouge1,rouge2,rougeL,f1,em";
};

struct DiffuseArgs {
  std::string text;
  int t = 0;
  int steps = 1000;
  std::string schedule = "linear";
  double uniform_noise = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

inline std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace detail

inline RunConfig effective_train_config(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.corpus.empty()) {
    rc.data.corpus = a.corpus;
    rc.data.synthetic.clear();
  }
  if (!a.synthetic.empty()) {
    rc.data.synthetic = a.synthetic;
    rc.data.corpus.clear();
  }
  if (!a.corpus.empty() && !a.synthetic.empty()) throw UsageError("--corpus and --synthetic are mutually exclusive");
  if (a.steps) rc.train.total_steps = *a.steps;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.lr) rc.train.lr = *a.lr;
  if (a.seed) rc.train.seed = *a.seed;
  for (const auto& s : a.sets) apply_override(rc, s);
  return run_config_from_json(to_json(rc));
}

inline int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig rc = effective_train_config(a);
  if (a.print_config) {
    out << to_json(rc).dump(2) << '\n';
    return 0;
  }
  if (a.out.empty()) throw UsageError("train needs --out");
  const ParallelCorpus corpus = load_corpus(rc.data);

  TrainOptions opts;
  opts.out_dir = a.out;
  const long total = rc.train.total_steps;
  const long every = std::max<long>(1, total / 20);
  if (!a.quiet) {
    opts.on_step = [&out, every, total](long step, double loss) {
      if (step % every == 0 || step == total) out << "step " << step << " loss " << detail::fixed(loss, 6) << '\n';
    };
  }

  auto warn_truncation = [&](const TrainingData& data, const Checkpoint& start) {
    const int prompt = data.target_len + 1 + data.source_len;
    const int limit = start.model.config().max_src_len;
    if (start.train.self_prompt_prob > 0.0 && prompt > limit) {
      err << "warning: self-prompted conditions need " << prompt << " tokens but model.max_src_len is " << limit
          << "; the last " << prompt - limit << " condition token(s) will be cut\n";
    }
  };
  Checkpoint result = [&] {
    if (!a.resume.empty()) {
      Checkpoint start = load_checkpoint(a.resume);
      DataConfig dc = rc.data;
      dc.source_len = start.source_len;
      dc.target_len = start.target_len;
      const TrainingData data = prepare_data(corpus, dc, start.model.config(), start.vocab);
      warn_truncation(data, start);
      return train(data, rc, std::move(start), opts);
    }
    const TrainingData data = prepare_data(corpus, rc.data, rc.model);
    Checkpoint start = initial_checkpoint(data, rc);
    warn_truncation(data, start);
    return train(data, rc, std::move(start), opts);
  }();
  out << "wrote " << (std::filesystem::path(a.out) / "checkpoint.dnat").string() << " ("
      << result.model.parameter_count() << " parameters, step " << result.step << ")\n";
  return 0;
}

inline int run_generate(const GenerateArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  SampleConfig sc = ck.sample;
  const int T = ck.train.diffusion_steps;
  sc.steps = a.steps ? *a.steps : std::min(sc.steps, T);
  if (a.sp_turns) sc.sp_turns = *a.sp_turns;
  sc.length = a.length ? *a.length : (sc.length > 0 ? sc.length : ck.target_len);
  if (a.seed) sc.seed = *a.seed;
  if (a.mode) sc.mode = parse_sampler_mode(*a.mode);
  if (a.temperature) sc.temperature = *a.temperature;
  if (a.carry_prompt) sc.carry_prompt = true;
  sc.trace = !a.trace.empty();
  try {
    sc.validate();
    make_step_plan(T, sc.steps);
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  const std::vector<std::string> inputs =
      std::filesystem::is_regular_file(a.input) ? detail::read_lines(a.input) : std::vector<std::string>{a.input};
  std::vector<TokenSequence> conds;
  for (const auto& line : inputs) conds.push_back(encode(ck.vocab, line, static_cast<std::size_t>(ck.source_len)));

  const DiffusionProcess dp = make_process(ck.train, ck.vocab);
  std::vector<GenerationTrace> traces;
  const auto outputs = generate_batch(ck.model, conds, dp, sc, sc.trace ? &traces : nullptr);
  for (const auto& y : outputs) out << dnat::decode(ck.vocab, y) << '\n';

  if (sc.trace) {
    std::ofstream tr(a.trace, std::ios::trunc);
    if (!tr) throw Error("cannot write " + a.trace);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      for (const auto& st : traces[i].steps) {
        const json rec{{"input", i},
                       {"t", st.t},
                       {"y_t", token_strings(ck.vocab, st.yt)},
                       {"y0_hat", token_strings(ck.vocab, st.y0_hat)}};
        tr << rec.dump() << '\n';
      }
    }
    if (!tr) throw Error("failed writing " + a.trace);
  }
  return 0;
}

inline int run_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto hyps = metrics::tokenize_lines(detail::read_lines(a.hyp));
  const auto refs = metrics::tokenize_lines(detail::read_lines(a.ref));
  if (hyps.size() != refs.size()) {
    throw Error(a.hyp + " has " + std::to_string(hyps.size()) + " lines but " + a.ref + " has " +
                std::to_string(refs.size()));
  }
  const auto names = detail::split_commas(a.metrics);
  if (names.empty()) throw UsageError("no metrics requested");
  for (const auto& n : names) {
    const auto& known = metrics::known_metrics();
    if (std::find(known.begin(), known.end(), n) == known.end()) throw UsageError("unknown metric '" + n + "'");
  }
  const auto report = metrics::evaluate(hyps, refs, names);
  for (const auto& [name, value] : report.values) out << name << '\t' << detail::fixed(value * 100.0, 2) << '\n';
  return 0;
}

inline int run_diffuse(const DiffuseArgs& a, std::ostream& out) {
  if (a.steps < 1) throw UsageError("--steps must be >= 1");
  if (a.t < 0 || a.t > a.steps) throw UsageError("--t must lie in [0, --steps]");
  const auto toks = split_whitespace(a.text);
  if (toks.empty()) throw UsageError("--text is empty");
  const Vocabulary vocab = build_vocabulary({a.text}, 1);
  const DiffusionProcess dp(make_schedule(parse_schedule_kind(a.schedule), a.steps, a.uniform_noise), vocab);
  Rng rng(a.seed);
  const TokenSequence y0 = encode(vocab, a.text, toks.size());
  const TokenSequence yt = dp.forward_sample(y0, a.t, rng);
  const auto strs = token_strings(vocab, yt);
  for (std::size_t i = 0; i < strs.size(); ++i) out << (i ? " " : "") << strs[i];
  out << '\n';
  return 0;
}

inline int run_verify(std::ostream& out) {
  const auto rep = verify::run_verify();
  for (const auto& c : rep.checks) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << " [" << detail::fixed(c.seconds, 2)
        << " s]\n";
  }
  out << (rep.ok() ? "all checks passed" : "verification failed") << '\n';
  return rep.ok() ? 0 : 1;
}

/// Parses `args` (without the program name) and runs the subcommand.
/// Exit codes: 0 success, 1 domain error, 2 usage error.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Discrete absorbing-state diffusion for non-autoregressive text generation", "dnat"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a denoiser on a TSV corpus or a synthetic task");
  train_cmd->add_option("--corpus", ta.corpus, "TSV file of source<TAB>target lines");
  train_cmd->add_option("--synthetic", ta.synthetic, "Synthetic task, e.g. copy,K=20,len=8,n=5000,seed=7");
  train_cmd->add_option("--config", ta.config, "JSON run configuration");
  train_cmd->add_option("--out", ta.out, "Output directory");
  train_cmd->add_option("--resume", ta.resume, "Continue from this checkpoint");
  train_cmd->add_flag("--print-config", ta.print_config, "Print the effective configuration and exit");
  train_cmd->add_flag("--quiet", ta.quiet, "No progress output");
  train_cmd->add_option("--steps", ta.steps, "Override train.total_steps");
  train_cmd->add_option("--batch-size", ta.batch_size, "Override train.batch_size");
  train_cmd->add_option("--lr", ta.lr, "Override train.lr");
  train_cmd->add_option("--seed", ta.seed, "Override train.seed");
  train_cmd->add_option("--set", ta.sets, "Override any key: section.key=value (repeatable)");

  GenerateArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Generate targets for conditions");
  gen_cmd->add_option("--checkpoint", ga.checkpoint, "Checkpoint file")->required();
  gen_cmd->add_option("--input", ga.input, "Condition text, or a file with one condition per line")->required();
  gen_cmd->add_option("--steps", ga.steps, "Inference steps S");
  gen_cmd->add_option("--sp-turns", ga.sp_turns, "Self-prompting turns K");
  gen_cmd->add_option("--length", ga.length, "Target length n");
  gen_cmd->add_option("--seed", ga.seed, "Sampling seed");
  gen_cmd->add_option("--mode", ga.mode, "marginal_renoise or posterior");
  gen_cmd->add_option("--temperature", ga.temperature, "0 is greedy");
  gen_cmd->add_flag("--carry-prompt", ga.carry_prompt, "Prompt each step's first pass with the previous estimate");
  gen_cmd->add_option("--trace", ga.trace, "Write per-step states as JSON lines");

  EvaluateArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score hypotheses against references");
  eval_cmd->add_option("--hyp", ea.hyp, "Hypothesis file, one per line")->required();
  eval_cmd->add_option("--ref", ea.ref, "Reference file, one per line")->required();
  eval_cmd->add_option("--metrics", ea.metrics, "Comma-separated metric names");

  DiffuseArgs da;
  auto* diffuse_cmd = app.add_subcommand("diffuse", "Corrupt a text with the forward process");
  diffuse_cmd->add_option("--text", da.text, "Whitespace-tokenized text")->required();
  diffuse_cmd->add_option("--t", da.t, "Diffusion step")->required();
  diffuse_cmd->add_option("--steps", da.steps, "Total diffusion steps T");
  diffuse_cmd->add_option("--schedule", da.schedule, "linear or cosine");
  diffuse_cmd->add_option("--uniform-noise", da.uniform_noise, "Share of corruption sent to random tokens");
  diffuse_cmd->add_option("--seed", da.seed, "Random seed");

  auto* verify_cmd = app.add_subcommand("verify", "Run the exact oracle checks");

  if (args.empty()) {
    err << app.help();
    return 2;
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return run_train(ta, out, err);
    if (*gen_cmd) return run_generate(ga, out);
    if (*eval_cmd) return run_evaluate(ea, out);
    if (*diffuse_cmd) return run_diffuse(da, out);
    if (*verify_cmd) return run_verify(out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace dnat::cli
