#include <gtest/gtest.h>

#include <filesystem>

#include "dnat/checkpoint.hpp"
#include "dnat/trainer.hpp"

using namespace dnat;
namespace fs = std::filesystem;

namespace {

constexpr TokenId kMask = Vocabulary::kMaskId;
constexpr TokenId kSep = Vocabulary::kSepId;
constexpr TokenId kPad = Vocabulary::kPadId;

RunConfig tiny_run(long steps = 5) {
  RunConfig rc;
  rc.model.d_model = 16;
  rc.model.n_heads = 2;
  rc.model.n_enc_layers = 1;
  rc.model.n_dec_layers = 1;
  rc.model.d_ff = 32;
  rc.model.max_src_len = 12;
  rc.model.max_tgt_len = 5;
  rc.train.diffusion_steps = 20;
  rc.train.batch_size = 8;
  rc.train.total_steps = steps;
  rc.train.lr = 1e-3;
  rc.train.seed = 4;
  rc.data.synthetic = "reverse,K=6,len=5,n=200,seed=2";
  return rc;
}

TrainingData tiny_data(const RunConfig& rc) { return prepare_data(load_corpus(rc.data), rc.data, rc.model); }

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dnat_test_trainer_" + name);
  fs::remove_all(p);
  return p;
}

bool same_grads(const Gradients& a, const Gradients& b, double tol) {
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (!a.tensors[i].isApprox(b.tensors[i], tol) && (a.tensors[i] - b.tensors[i]).cwiseAbs().maxCoeff() > tol) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(ComposePrompt, Layout) {
  const TokenSequence est{4, 5};
  const TokenSequence cond{6, 7, kPad, kPad};
  EXPECT_EQ(compose_prompt(est, cond, 10), (TokenSequence{4, 5, kSep, 6, 7}));
  // overlong prompts lose the end of the condition, never the estimate
  EXPECT_EQ(compose_prompt(est, cond, 4), (TokenSequence{4, 5, kSep, 6}));
  EXPECT_EQ(compose_prompt(est, cond, 2), (TokenSequence{4, 5}));
  try {
    compose_prompt(est, cond, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "estimate is longer than max_src_len");
  }
}

TEST(PrepareData, VocabularyAndLengths) {
  const RunConfig rc = tiny_run();
  const TrainingData d = tiny_data(rc);
  EXPECT_EQ(d.source_len, 5);
  EXPECT_EQ(d.target_len, 5);
  EXPECT_EQ(d.vocab.size(), 4u + 6u);
  EXPECT_EQ(d.train.size(), 180u);
  EXPECT_EQ(d.test.size(), 10u);
  EXPECT_EQ(d.test_pairs.size(), d.test.size());
  for (const auto& ex : d.train) {
    EXPECT_EQ(ex.condition.size(), 5u);
    EXPECT_FALSE(ex.target.contains(kMask));
  }
  EXPECT_EQ(decode(d.vocab, d.test[0].target), d.test_pairs[0].second);
}

TEST(PrepareData, LengthsMustFitTheModel) {
  RunConfig rc = tiny_run();
  rc.data.target_len = 6;
  EXPECT_THROW(tiny_data(rc), Error);
}

TEST(ExampleLoss, NoSelfPromptIsASinglePlainPass) {
  RunConfig rc = tiny_run();
  rc.train.self_prompt_prob = 0.0;
  const TrainingData d = tiny_data(rc);
  const Checkpoint ck = initial_checkpoint(d, rc);
  const DiffusionProcess dp = make_process(rc.train, d.vocab);
  const TrainExample& ex = d.train[3];
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng a(seed), b(seed);
    const auto got = example_loss(ck.model, ex, rc.train, dp, a);
    const int t = 1 + static_cast<int>(b.below(20));
    const TokenSequence yt = dp.forward_sample(ex.target, t, b);
    const auto want = loss_and_gradients(ck.model, ex.condition, yt, ex.target);
    EXPECT_EQ(got.loss, want.loss);
    EXPECT_TRUE(same_grads(got.grads, want.grads, 0.0));
  }
}

TEST(ExampleLoss, FirstPassIsDetached) {
  RunConfig rc = tiny_run();
  rc.train.self_prompt_prob = 1.0;
  const TrainingData d = tiny_data(rc);
  const Checkpoint ck = initial_checkpoint(d, rc);
  const DiffusionProcess dp = make_process(rc.train, d.vocab);
  const TrainExample& ex = d.train[7];
  Rng a(11), b(11);
  const auto got = example_loss(ck.model, ex, rc.train, dp, a);
  const int t = 1 + static_cast<int>(b.below(20));
  const TokenSequence yt = dp.forward_sample(ex.target, t, b);
  const TokenSequence first = decode(ck.model, yt, encode(ck.model, ex.condition)).argmax();
  const auto want = loss_and_gradients(ck.model, compose_prompt(first, ex.condition, 12), yt, ex.target);
  EXPECT_EQ(got.loss, want.loss);
  EXPECT_TRUE(same_grads(got.grads, want.grads, 0.0));
}

TEST(BatchGradients, MeanOfExamplesAndErrors) {
  const RunConfig rc = tiny_run();
  const TrainingData d = tiny_data(rc);
  const Checkpoint ck = initial_checkpoint(d, rc);
  const DiffusionProcess dp = make_process(rc.train, d.vocab);
  std::vector<TrainExample> batch(d.train.begin(), d.train.begin() + 20);
  Rng r(5);
  const auto got = batch_gradients(ck.model, batch, rc.train, dp, r);
  Rng seeds(5);
  double loss = 0.0;
  Gradients g = Gradients::zeros_like(ck.model);
  for (const auto& ex : batch) {
    Rng er(seeds.next_u64());
    const auto part = example_loss(ck.model, ex, rc.train, dp, er);
    loss += part.loss;
    g.add(part.grads);
  }
  g.scale(1.0 / 20.0);
  EXPECT_NEAR(got.loss, loss / 20.0, 1e-12);
  EXPECT_TRUE(same_grads(got.grads, g, 1e-12));

  EXPECT_THROW(batch_gradients(ck.model, std::span<const TrainExample>{}, rc.train, dp, r), Error);
  batch[1].target.ids.pop_back();
  try {
    batch_gradients(ck.model, batch, rc.train, dp, r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "mixed target lengths in batch");
  }
}

TEST(TrainStep, DescendsItsOwnObjective) {
  const RunConfig rc = tiny_run();
  const TrainingData d = tiny_data(rc);
  Checkpoint ck = initial_checkpoint(d, rc);
  const DiffusionProcess dp = make_process(rc.train, d.vocab);
  int improved = 0;
  for (int step = 0; step < 100; ++step) {
    std::vector<TrainExample> batch;
    Rng pick(derive_seed(1, static_cast<std::uint64_t>(step)));
    for (int i = 0; i < 8; ++i) batch.push_back(d.train[pick.below(d.train.size())]);
    const std::uint64_t seed = derive_seed(2, static_cast<std::uint64_t>(step));
    Rng r1(seed), r2(seed);
    const double before = train_step(ck.model, *ck.optimizer, batch, rc.train, dp, r1);
    const double after = batch_gradients(ck.model, batch, rc.train, dp, r2).loss;
    improved += after <= before ? 1 : 0;
  }
  EXPECT_GE(improved, 90);
}

TEST(Train, ZeroStepsReturnsTheInitialCheckpoint) {
  const RunConfig rc = tiny_run(0);
  const TrainingData d = tiny_data(rc);
  const Checkpoint ck = train(d, rc);
  EXPECT_TRUE(ck == initial_checkpoint(d, rc));
  EXPECT_EQ(ck.step, 0);
}

TEST(Train, WritesRunDirectory) {
  const RunConfig rc = tiny_run(4);
  const fs::path dir = fresh_dir("files");
  TrainOptions o;
  o.out_dir = dir;
  std::vector<long> seen;
  o.on_step = [&](long s, double) { seen.push_back(s); };
  const Checkpoint ck = train(tiny_data(rc), rc, o);
  EXPECT_EQ(seen, (std::vector<long>{1, 2, 3, 4}));
  EXPECT_TRUE(load_checkpoint(dir / "checkpoint.dnat") == ck);
  EXPECT_TRUE(Vocabulary::load(dir / "vocab.txt") == ck.vocab);
  EXPECT_TRUE(load_run_config(dir / "config.json") == rc);
  const std::string log = read_file_bytes(dir / "loss.csv");
  EXPECT_EQ(log.rfind("step,loss\n1,", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const RunConfig full = tiny_run(6);
  const TrainingData d = tiny_data(full);
  const fs::path a = fresh_dir("straight"), b = fresh_dir("resumed");
  TrainOptions oa, ob;
  oa.out_dir = a;
  ob.out_dir = b;
  train(d, full, oa);
  train(d, tiny_run(3), ob);
  const Checkpoint mid = load_checkpoint(b / "checkpoint.dnat");
  EXPECT_EQ(mid.step, 3);
  train(d, full, mid, ob);
  EXPECT_EQ(read_file_bytes(a / "checkpoint.dnat"), read_file_bytes(b / "checkpoint.dnat"));
  EXPECT_EQ(read_file_bytes(a / "loss.csv"), read_file_bytes(b / "loss.csv"));
}

TEST(Train, SeedControlsTheRun) {
  RunConfig rc = tiny_run(3);
  const TrainingData d = tiny_data(rc);
  const Checkpoint a = train(d, rc), b = train(d, rc);
  EXPECT_TRUE(a == b);
  rc.train.seed = 5;
  EXPECT_FALSE(train(d, rc) == a);
}

TEST(Train, PeriodicCheckpoints) {
  RunConfig rc = tiny_run(5);
  rc.train.checkpoint_every = 2;
  const fs::path dir = fresh_dir("periodic");
  TrainOptions o;
  o.out_dir = dir;
  long last_saved = -1;
  o.on_step = [&](long s, double) {
    if (s == 3) last_saved = load_checkpoint(dir / "checkpoint.dnat").step;
  };
  train(tiny_data(rc), rc, o);
  EXPECT_EQ(last_saved, 2);
  EXPECT_EQ(load_checkpoint(dir / "checkpoint.dnat").step, 5);
}
