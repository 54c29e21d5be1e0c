#include <gtest/gtest.h>

#include <filesystem>

#include "dnat/checkpoint.hpp"
#include "dnat/trainer.hpp"

using namespace dnat;
namespace fs = std::filesystem;

namespace {

Checkpoint small_checkpoint(bool with_optimizer) {
  Vocabulary vocab = build_vocabulary({"a b c", "d e"});
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_enc_layers = 1;
  mc.n_dec_layers = 1;
  mc.d_ff = 16;
  mc.max_src_len = 6;
  mc.max_tgt_len = 4;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.time_embedding = true;
  mc.time_steps = 10;
  TrainConfig tc;
  tc.diffusion_steps = 10;
  tc.schedule = ScheduleKind::cosine;
  tc.seed = 42;
  SampleConfig sc;
  sc.steps = 5;
  Checkpoint c{vocab, init_denoiser(mc, 9), tc, sc, 5, 3, 17, std::nullopt};
  if (with_optimizer) {
    AdamState st = AdamState::zeros_like(c.model);
    st.m[0](0, 0) = 0.25;
    st.v[1].setConstant(1e-300);
    st.step = 17;
    c.optimizer = st;
  }
  return c;
}

}  // namespace

TEST(CheckpointFormat, ExactByteLayout) {
  CheckpointFile f;
  f.header = json{{"k", 1}};
  f.records.push_back({"w", {1, 2}, {1.0, -2.5}});
  const std::string bytes = serialize_checkpoint(f);
  std::string want("DNAT", 4);
  want += std::string("\x01\x00\x00\x00", 4);
  want += std::string("\x07\x00\x00\x00", 4) + R"({"k":1})";
  want += std::string("\x01\x00\x00\x00", 4) + "w";
  want += std::string("\x02\x00\x00\x00", 4);
  want += std::string("\x01\x00\x00\x00\x00\x00\x00\x00", 8);
  want += std::string("\x02\x00\x00\x00\x00\x00\x00\x00", 8);
  want += std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8);  // 1.0
  want += std::string("\x00\x00\x00\x00\x00\x00\x04\xc0", 8);  // -2.5
  want += std::string("\x00\x00\x00\x00", 4);
  EXPECT_EQ(bytes, want);
  const CheckpointFile back = parse_checkpoint(bytes);
  EXPECT_EQ(back.header, f.header);
  EXPECT_EQ(back.records, f.records);
}

TEST(CheckpointFormat, RejectsDamage) {
  CheckpointFile f;
  f.header = json{{"k", 1}};
  f.records.push_back({"w", {3}, {1.0, 2.0, 3.0}});
  const std::string bytes = serialize_checkpoint(f);
  for (std::size_t cut : {0ul, 3ul, 10ul, bytes.size() - 9, bytes.size() - 1}) {
    try {
      parse_checkpoint(bytes.substr(0, cut), "x.dnat");
      FAIL() << "cut at " << cut;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find("x.dnat"), std::string::npos);
    }
  }
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(magic), Error);
  std::string version = bytes;
  version[4] = 2;
  EXPECT_THROW(parse_checkpoint(version), Error);
  EXPECT_THROW(parse_checkpoint(bytes + "z"), Error);
  f.records[0].dims = {2};
  EXPECT_THROW(serialize_checkpoint(f), Error);
}

TEST(Checkpoint, RoundTripWithoutOptimizer) {
  const Checkpoint c = small_checkpoint(false);
  const fs::path p = fs::temp_directory_path() / "dnat_test_ck_plain.dnat";
  save_checkpoint(c, p);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_TRUE(back == c);
  EXPECT_FALSE(back.optimizer.has_value());
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.train.schedule, ScheduleKind::cosine);
  EXPECT_EQ(back.model.config().time_steps, 10);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint c = small_checkpoint(true);
  const fs::path p = fs::temp_directory_path() / "dnat_test_ck_adam.dnat";
  save_checkpoint(c, p);
  const Checkpoint back = load_checkpoint(p);
  EXPECT_TRUE(back == c);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->v[1](0, 0), 1e-300);
  // re-serializing reproduces the file byte for byte
  EXPECT_EQ(serialize_checkpoint(to_file(back)), read_file_bytes(p));
}

TEST(Checkpoint, HeaderCarriesRunSettings) {
  const CheckpointFile f = to_file(small_checkpoint(false));
  EXPECT_EQ(f.header.at("diffusion").at("steps"), 10);
  EXPECT_EQ(f.header.at("diffusion").at("schedule"), "cosine");
  EXPECT_EQ(f.header.at("vocab").at(1), "[MASK]");
  EXPECT_EQ(f.header.at("train_state").at("seed"), 42);
  EXPECT_EQ(f.header.at("data").at("target_len"), 3);
}

TEST(Checkpoint, MissingTensorIsReported) {
  CheckpointFile f = to_file(small_checkpoint(false));
  const std::string dropped = f.records.back().name;
  f.records.pop_back();
  try {
    from_file(f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(dropped), std::string::npos);
  }
}

TEST(Checkpoint, MissingFileNamesThePath) {
  try {
    load_checkpoint("/nonexistent/model.dnat");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/model.dnat"), std::string::npos);
  }
}
