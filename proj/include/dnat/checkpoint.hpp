#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dnat/config.hpp"
#include "dnat/error.hpp"
#include "dnat/model.hpp"
#include "dnat/optim.hpp"
#include "dnat/vocab.hpp"

namespace dnat {

/// One named dense tensor as stored on disk.
struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

/// Raw container: a JSON header plus tensor records.
///
///   "DNAT" | u32 version | u32 n | n bytes JSON
///   { u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[prod dims] }*
///   u32 0
///
/// All integers and floats are little-endian.
struct CheckpointFile {
  static constexpr std::uint32_t kVersion = 1;

  json header;
  std::vector<TensorRecord> records;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string context) : data_(data), context_(std::move(context)) {}

  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(context_ + ": truncated checkpoint");
  }

  const std::string& data_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const CheckpointFile& f) {
  std::string out = "DNAT";
  detail::put_u32(out, CheckpointFile::kVersion);
  const std::string header = f.header.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& r : f.records) {
    if (r.name.empty()) throw Error("tensor record needs a name");
    std::uint64_t count = 1;
    for (auto d : r.dims) count *= d;
    if (count != r.values.size()) throw Error("tensor record " + r.name + " has inconsistent size");
    detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) detail::put_u64(out, d);
    for (double v : r.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  detail::put_u32(out, 0);
  return out;
}

inline CheckpointFile parse_checkpoint(const std::string& bytes, const std::string& context = "checkpoint") {
  detail::ByteReader in(bytes, context);
  if (in.bytes(4) != "DNAT") throw Error(context + ": not a DNAT checkpoint");
  const auto version = in.uint(4);
  if (version != CheckpointFile::kVersion) {
    throw Error(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointFile f;
  const auto header_len = static_cast<std::size_t>(in.uint(4));
  try {
    f.header = json::parse(in.bytes(header_len));
  } catch (const json::parse_error& e) {
    throw Error(context + ": corrupt checkpoint header: " + e.what());
  }
  for (;;) {
    const auto name_len = static_cast<std::size_t>(in.uint(4));
    if (name_len == 0) break;
    TensorRecord r;
    r.name = in.bytes(name_len);
    const auto rank = in.uint(4);
    std::uint64_t count = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      r.dims.push_back(in.uint(8));
      count *= r.dims.back();
    }
    if (count > bytes.size() / 8) throw Error(context + ": truncated checkpoint");
    r.values.resize(static_cast<std::size_t>(count));
    for (auto& v : r.values) v = std::bit_cast<double>(in.uint(8));
    f.records.push_back(std::move(r));
  }
  if (!in.at_end()) throw Error(context + ": trailing bytes after checkpoint terminator");
  return f;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Everything needed to generate from or resume a run.
struct Checkpoint {
  Vocabulary vocab;
  Denoiser model;
  TrainConfig train;
  SampleConfig sample;
  int source_len = 0;
  int target_len = 0;
  /// Completed optimizer updates.
  long step = 0;
  std::optional<AdamState> optimizer;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.vocab == b.vocab && a.model == b.model && a.train == b.train && a.sample == b.sample &&
           a.source_len == b.source_len && a.target_len == b.target_len && a.step == b.step &&
           a.optimizer == b.optimizer;
  }
};

namespace detail {

inline TensorRecord to_record(std::string name, const ad::Matrix& m) {
  TensorRecord r;
  r.name = std::move(name);
  r.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  r.values.assign(m.data(), m.data() + m.size());
  return r;
}

inline ad::Matrix from_record(const TensorRecord& r, Eigen::Index rows, Eigen::Index cols) {
  if (r.dims.size() != 2 || r.dims[0] != static_cast<std::uint64_t>(rows) ||
      r.dims[1] != static_cast<std::uint64_t>(cols)) {
    throw Error("checkpoint tensor " + r.name + " has the wrong shape");
  }
  ad::Matrix m(rows, cols);
  std::memcpy(m.data(), r.values.data(), r.values.size() * sizeof(double));
  return m;
}

}  // namespace detail

inline CheckpointFile to_file(const Checkpoint& c) {
  CheckpointFile f;
  const ModelConfig& mc = c.model.config();
  json model = to_json(mc);
  model["vocab_size"] = mc.vocab_size;
  model["time_steps"] = mc.time_steps;
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < c.vocab.size(); ++i) tokens.push_back(c.vocab.token(static_cast<TokenId>(i)));
  f.header = json{{"model", model},
                  {"vocab", tokens},
                  {"diffusion",
                   {{"steps", c.train.diffusion_steps},
                    {"schedule", std::string(to_string(c.train.schedule))},
                    {"uniform_noise", c.train.uniform_noise}}},
                  {"train", to_json(c.train)},
                  {"sample", to_json(c.sample)},
                  {"data", {{"source_len", c.source_len}, {"target_len", c.target_len}}},
                  {"train_state", {{"step", c.step}, {"seed", c.train.seed}}}};
  for (std::size_t i = 0; i < c.model.num_tensors(); ++i) {
    f.records.push_back(detail::to_record(c.model.name(i), c.model.tensor(i)));
  }
  if (c.optimizer) {
    if (c.optimizer->m.size() != c.model.num_tensors()) throw Error("optimizer shape mismatch");
    for (std::size_t i = 0; i < c.model.num_tensors(); ++i) {
      f.records.push_back(detail::to_record("adam.m/" + c.model.name(i), c.optimizer->m[i]));
    }
    for (std::size_t i = 0; i < c.model.num_tensors(); ++i) {
      f.records.push_back(detail::to_record("adam.v/" + c.model.name(i), c.optimizer->v[i]));
    }
  }
  return f;
}

inline Checkpoint from_file(const CheckpointFile& f) {
  try {
    const json& h = f.header;
    json model = h.at("model");
    ModelConfig mc;
    mc.vocab_size = model.at("vocab_size").get<int>();
    mc.time_steps = model.at("time_steps").get<int>();
    model.erase("vocab_size");
    model.erase("time_steps");
    mc = model_config_from_json(model, mc);
    mc.validate();

    Vocabulary vocab(h.at("vocab").get<std::vector<std::string>>());
    if (static_cast<int>(vocab.size()) != mc.vocab_size) throw Error("checkpoint vocabulary size mismatch");

    const ParameterLayout layout = make_layout(mc);
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : f.records) {
      if (!by_name.emplace(r.name, &r).second) throw Error("duplicate checkpoint tensor " + r.name);
    }
    auto fetch = [&](const std::string& name, const ParameterSpec& s) {
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw Error("checkpoint is missing tensor " + name);
      return detail::from_record(*it->second, s.rows, s.cols);
    };
    std::vector<ad::Matrix> tensors;
    for (const auto& s : layout.specs) tensors.push_back(fetch(s.name, s));

    std::optional<AdamState> opt;
    if (by_name.count("adam.m/" + layout.specs.front().name)) {
      AdamState st;
      for (const auto& s : layout.specs) st.m.push_back(fetch("adam.m/" + s.name, s));
      for (const auto& s : layout.specs) st.v.push_back(fetch("adam.v/" + s.name, s));
      st.step = h.at("train_state").at("step").get<long>();
      opt = std::move(st);
    }

    Checkpoint c{std::move(vocab), Denoiser(mc, std::move(tensors)),
                 train_config_from_json(h.at("train")), sample_config_from_json(h.at("sample")),
                 h.at("data").at("source_len").get<int>(), h.at("data").at("target_len").get<int>(),
                 h.at("train_state").at("step").get<long>(), std::move(opt)};
    return c;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(to_file(c)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const CheckpointFile f = parse_checkpoint(read_file_bytes(path), path.string());
  try {
    return from_file(f);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace dnat
