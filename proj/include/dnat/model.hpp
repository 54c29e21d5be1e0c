#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dnat/error.hpp"
#include "dnat/rng.hpp"
#include "dnat/tape.hpp"
#include "dnat/vocab.hpp"

namespace dnat {

/// Shape of the encoder-decoder denoiser.
struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ff = 256;
  int max_src_len = 32;
  int max_tgt_len = 16;
  int vocab_size = 0;
  double dropout = 0.0;
  /// Adds a learned (time_steps + 1) x d_model table to the decoder input.
  bool time_embedding = false;
  /// Number of diffusion steps T; only used when time_embedding is set.
  int time_steps = 0;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_enc_layers < 0 || n_dec_layers < 0 || d_ff <= 0 ||
        max_src_len <= 0 || max_tgt_len <= 0) {
      throw Error("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw Error("d_model must be divisible by n_heads");
    if (vocab_size < 5) throw Error("vocab_size must be >= 5");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("dropout must lie in [0, 1)");
    if (time_embedding && time_steps < 1) throw Error("time_embedding needs time_steps >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParameterSpec {
  enum class Init { normal, zeros, ones };
  std::string name;
  int rows;
  int cols;
  Init init;
};

struct NormParams {
  int scale, offset;
};
struct AttentionParams {
  int wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FeedForwardParams {
  int w1, b1, w2, b2;
};
struct EncoderLayerParams {
  NormParams ln1;
  AttentionParams attn;
  NormParams ln2;
  FeedForwardParams ffn;
};
struct DecoderLayerParams {
  NormParams ln1;
  AttentionParams self_attn;
  NormParams ln2;
  AttentionParams cross_attn;
  NormParams ln3;
  FeedForwardParams ffn;
};

/// Ordered list of named tensors plus index handles into it.
///
/// Parameter count, with d = d_model, f = d_ff, K = vocab size, Ls/Lt the
/// maximum source/target lengths:
///   K d + Ls d + Lt d                          embeddings (output tied to K d)
///   + (T + 1) d                                time table, if enabled
///   + n_enc (4d^2 + 4d + 2df + f + d + 4d)     attention, FFN, two norms
///   + n_dec (8d^2 + 8d + 2df + f + d + 6d)     self + cross attention, three norms
///   + 4d                                       final encoder/decoder norms
struct ParameterLayout {
  std::vector<ParameterSpec> specs;
  int tok_emb = -1;
  int src_pos = -1;
  int tgt_pos = -1;
  int time_emb = -1;
  std::vector<EncoderLayerParams> enc;
  NormParams enc_final{};
  std::vector<DecoderLayerParams> dec;
  NormParams dec_final{};

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (specs[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }
};

inline ParameterLayout make_layout(const ModelConfig& cfg) {
  ParameterLayout L;
  const int d = cfg.d_model;
  const int f = cfg.d_ff;
  auto add = [&L](std::string name, int r, int c, ParameterSpec::Init init) {
    L.specs.push_back({std::move(name), r, c, init});
    return static_cast<int>(L.specs.size()) - 1;
  };
  using I = ParameterSpec::Init;
  auto norm = [&](const std::string& p) {
    NormParams n{};
    n.scale = add(p + ".scale", 1, d, I::ones);
    n.offset = add(p + ".offset", 1, d, I::zeros);
    return n;
  };
  auto attn = [&](const std::string& p) {
    AttentionParams a{};
    a.wq = add(p + ".wq", d, d, I::normal);
    a.bq = add(p + ".bq", 1, d, I::zeros);
    a.wk = add(p + ".wk", d, d, I::normal);
    a.bk = add(p + ".bk", 1, d, I::zeros);
    a.wv = add(p + ".wv", d, d, I::normal);
    a.bv = add(p + ".bv", 1, d, I::zeros);
    a.wo = add(p + ".wo", d, d, I::normal);
    a.bo = add(p + ".bo", 1, d, I::zeros);
    return a;
  };
  auto ffn = [&](const std::string& p) {
    FeedForwardParams m{};
    m.w1 = add(p + ".w1", d, f, I::normal);
    m.b1 = add(p + ".b1", 1, f, I::zeros);
    m.w2 = add(p + ".w2", f, d, I::normal);
    m.b2 = add(p + ".b2", 1, d, I::zeros);
    return m;
  };

  L.tok_emb = add("tok_emb", cfg.vocab_size, d, I::normal);
  L.src_pos = add("src_pos", cfg.max_src_len, d, I::normal);
  L.tgt_pos = add("tgt_pos", cfg.max_tgt_len, d, I::normal);
  if (cfg.time_embedding) L.time_emb = add("time_emb", cfg.time_steps + 1, d, I::normal);
  for (int l = 0; l < cfg.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayerParams e{};
    e.ln1 = norm(p + ".ln1");
    e.attn = attn(p + ".attn");
    e.ln2 = norm(p + ".ln2");
    e.ffn = ffn(p + ".ffn");
    L.enc.push_back(e);
  }
  L.enc_final = norm("enc.final");
  for (int l = 0; l < cfg.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayerParams e{};
    e.ln1 = norm(p + ".ln1");
    e.self_attn = attn(p + ".self_attn");
    e.ln2 = norm(p + ".ln2");
    e.cross_attn = attn(p + ".cross_attn");
    e.ln3 = norm(p + ".ln3");
    e.ffn = ffn(p + ".ffn");
    L.dec.push_back(e);
  }
  L.dec_final = norm("dec.final");
  return L;
}

/// Closed-form parameter count (see ParameterLayout).
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.d_ff);
  std::size_t n = static_cast<std::size_t>(c.vocab_size) * d +
                  static_cast<std::size_t>(c.max_src_len) * d +
                  static_cast<std::size_t>(c.max_tgt_len) * d;
  if (c.time_embedding) n += static_cast<std::size_t>(c.time_steps + 1) * d;
  n += static_cast<std::size_t>(c.n_enc_layers) * (4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d);
  n += static_cast<std::size_t>(c.n_dec_layers) * (8 * d * d + 8 * d + 2 * d * f + f + d + 6 * d);
  n += 4 * d;
  return n;
}

/// The trainable denoiser: a config plus one dense tensor per layout entry.
/// The output projection reuses tok_emb (tied weights).
class Denoiser {
 public:
  Denoiser(ModelConfig cfg, std::vector<ad::Matrix> tensors)
      : cfg_(std::move(cfg)), layout_(make_layout(cfg_)), tensors_(std::move(tensors)) {
    cfg_.validate();
    if (tensors_.size() != layout_.specs.size()) throw Error("parameter list does not match layout");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& s = layout_.specs[i];
      if (tensors_[i].rows() != s.rows || tensors_[i].cols() != s.cols) {
        throw Error("shape mismatch for parameter " + s.name);
      }
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParameterLayout& layout() const noexcept { return layout_; }

  std::size_t num_tensors() const noexcept { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return layout_.specs[i].name; }
  const ad::Matrix& tensor(std::size_t i) const { return tensors_[i]; }
  ad::Matrix& tensor(std::size_t i) { return tensors_[i]; }
  const std::vector<ad::Matrix>& tensors() const noexcept { return tensors_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      if (!t.allFinite()) return false;
    }
    return true;
  }

  friend bool operator==(const Denoiser& a, const Denoiser& b) {
    if (!(a.cfg_ == b.cfg_) || a.tensors_.size() != b.tensors_.size()) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i) {
      if (a.tensors_[i] != b.tensors_[i]) return false;
    }
    return true;
  }

 private:
  ModelConfig cfg_;
  ParameterLayout layout_;
  std::vector<ad::Matrix> tensors_;
};

/// Weights and embeddings ~ N(0, 0.02^2), biases 0, norm scales 1.
inline Denoiser init_denoiser(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const ParameterLayout layout = make_layout(cfg);
  Rng rng(seed);
  std::vector<ad::Matrix> tensors;
  tensors.reserve(layout.specs.size());
  for (const auto& s : layout.specs) {
    ad::Matrix m(s.rows, s.cols);
    switch (s.init) {
      case ParameterSpec::Init::normal:
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.02 * rng.normal();
        break;
      case ParameterSpec::Init::zeros:
        m.setZero();
        break;
      case ParameterSpec::Init::ones:
        m.setOnes();
        break;
    }
    tensors.push_back(std::move(m));
  }
  return Denoiser(cfg, std::move(tensors));
}

/// Encoder output with the key mask used by cross-attention.
struct Memory {
  ad::Matrix states;
  std::vector<char> valid;
};

/// Per-position logits (n x K). [MASK] and [SEP] columns are -inf.
struct LogitsGrid {
  ad::Matrix values;

  std::size_t positions() const noexcept { return static_cast<std::size_t>(values.rows()); }
  std::size_t vocab_size() const noexcept { return static_cast<std::size_t>(values.cols()); }

  /// Greedy estimate; ties resolve to the lowest id.
  TokenSequence argmax() const {
    TokenSequence out(positions(), 0);
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
      Eigen::Index best = 0;
      values.row(r).maxCoeff(&best);
      out[static_cast<std::size_t>(r)] = static_cast<TokenId>(best);
    }
    return out;
  }

  /// Samples each position from softmax(logits / temperature).
  TokenSequence sample(double temperature, Rng& rng) const {
    TokenSequence out(positions(), 0);
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
      const double mx = values.row(r).maxCoeff();
      Eigen::RowVectorXd p = ((values.row(r).array() - mx) / temperature).exp();
      p /= p.sum();
      const double u = rng.uniform();
      double acc = 0.0;
      Eigen::Index pick = 0;
      values.row(r).maxCoeff(&pick);
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        acc += p(j);
        if (u < acc) {
          pick = j;
          break;
        }
      }
      out[static_cast<std::size_t>(r)] = static_cast<TokenId>(pick);
    }
    return out;
  }
};

/// Builds the denoiser's computation on a tape.
class ForwardPass {
 public:
  struct Encoded {
    ad::Var states;
    std::vector<char> valid;
  };

  ForwardPass(const Denoiser& model, ad::Tape& tape, Rng* dropout_rng = nullptr)
      : model_(model), tape_(tape), dropout_rng_(dropout_rng),
        leaves_(model.num_tensors(), ad::Var{}) {}

  ad::Var param(int index) {
    ad::Var& v = leaves_[static_cast<std::size_t>(index)];
    if (!v.valid()) v = tape_.leaf(model_.tensor(static_cast<std::size_t>(index)));
    return v;
  }

  /// Leaf variable for a tensor if the pass touched it.
  ad::Var touched(std::size_t index) const { return leaves_[index]; }

  Encoded encode(const TokenSequence& cond) {
    const auto& cfg = model_.config();
    const auto& L = model_.layout();
    if (cond.size() > static_cast<std::size_t>(cfg.max_src_len)) throw Error("condition too long");
    std::vector<int> ids(cond.begin(), cond.end());
    std::vector<int> pos(ids.size());
    std::vector<char> valid(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      pos[i] = static_cast<int>(i);
      valid[i] = cond[i] != Vocabulary::kPadId;
    }
    ad::Var x = ad::add(tape_, ad::gather_rows(tape_, param(L.tok_emb), ids),
                        ad::gather_rows(tape_, param(L.src_pos), pos));
    x = dropout(x);
    for (const auto& layer : L.enc) {
      ad::Var h = norm(layer.ln1, x);
      x = ad::add(tape_, x, dropout(attention(layer.attn, h, h, valid)));
      h = norm(layer.ln2, x);
      x = ad::add(tape_, x, dropout(feed_forward(layer.ffn, h)));
    }
    return {norm(L.enc_final, x), std::move(valid)};
  }

  /// Logits over the vocabulary for every target position.
  ad::Var decode(const TokenSequence& yt, const Encoded& memory, std::optional<int> t) {
    const auto& cfg = model_.config();
    const auto& L = model_.layout();
    if (yt.size() > static_cast<std::size_t>(cfg.max_tgt_len)) throw Error("target too long");
    if (t && !cfg.time_embedding) throw Error("unexpected time input");
    if (!t && cfg.time_embedding) throw Error("time input required when time_embedding is enabled");
    std::vector<int> ids(yt.begin(), yt.end());
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
    ad::Var y = ad::add(tape_, ad::gather_rows(tape_, param(L.tok_emb), ids),
                        ad::gather_rows(tape_, param(L.tgt_pos), pos));
    if (t) {
      if (*t < 0 || *t > cfg.time_steps) throw Error("step out of range");
      y = ad::add_row(tape_, y, ad::gather_rows(tape_, param(L.time_emb), {*t}));
    }
    y = dropout(y);
    const std::vector<char> all_valid(ids.size(), 1);
    for (const auto& layer : L.dec) {
      ad::Var h = norm(layer.ln1, y);
      y = ad::add(tape_, y, dropout(attention(layer.self_attn, h, h, all_valid)));
      h = norm(layer.ln2, y);
      y = ad::add(tape_, y, dropout(attention(layer.cross_attn, h, memory.states, memory.valid)));
      h = norm(layer.ln3, y);
      y = ad::add(tape_, y, dropout(feed_forward(layer.ffn, h)));
    }
    y = norm(L.dec_final, y);
    ad::Var logits = ad::matmul_nt(tape_, y, param(L.tok_emb));
    return ad::suppress_columns(tape_, logits, {Vocabulary::kMaskId, Vocabulary::kSepId});
  }

 private:
  ad::Var norm(const NormParams& p, ad::Var x) {
    return ad::layer_norm(tape_, x, param(p.scale), param(p.offset));
  }

  ad::Var attention(const AttentionParams& p, ad::Var xq, ad::Var xkv, const std::vector<char>& valid) {
    ad::Var q = ad::affine(tape_, xq, param(p.wq), param(p.bq));
    ad::Var k = ad::affine(tape_, xkv, param(p.wk), param(p.bk));
    ad::Var v = ad::affine(tape_, xkv, param(p.wv), param(p.bv));
    ad::Var o = ad::attention(tape_, q, k, v, valid, model_.config().n_heads);
    return ad::affine(tape_, o, param(p.wo), param(p.bo));
  }

  ad::Var feed_forward(const FeedForwardParams& p, ad::Var x) {
    ad::Var h = ad::gelu(tape_, ad::affine(tape_, x, param(p.w1), param(p.b1)));
    return ad::affine(tape_, h, param(p.w2), param(p.b2));
  }

  ad::Var dropout(ad::Var x) {
    const double rate = model_.config().dropout;
    if (rate <= 0.0 || dropout_rng_ == nullptr) return x;
    const ad::Matrix& v = tape_.value(x);
    ad::Matrix keep(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < keep.size(); ++i) {
      keep.data()[i] = dropout_rng_->bernoulli(rate) ? 0.0 : 1.0 / (1.0 - rate);
    }
    return ad::scale_by(tape_, x, std::move(keep));
  }

  const Denoiser& model_;
  ad::Tape& tape_;
  Rng* dropout_rng_;
  std::vector<ad::Var> leaves_;
};

/// Encoder pass in evaluation mode.
inline Memory encode(const Denoiser& model, const TokenSequence& cond) {
  ad::Tape tape(false);
  ForwardPass fp(model, tape);
  auto enc = fp.encode(cond);
  return {tape.value(enc.states), std::move(enc.valid)};
}

/// Decoder pass in evaluation mode. `t` must be given iff the model has a
/// time embedding.
inline LogitsGrid decode(const Denoiser& model, const TokenSequence& yt, const Memory& memory,
                         std::optional<int> t = std::nullopt) {
  ad::Tape tape(false);
  ForwardPass fp(model, tape);
  ForwardPass::Encoded enc{tape.leaf(memory.states, false), memory.valid};
  return {tape.value(fp.decode(yt, enc, t))};
}

/// Mean over positions of -log softmax(logits)[gold].
inline double nll_loss(const LogitsGrid& logits, const TokenSequence& y0) {
  if (logits.positions() != y0.size()) throw Error("length mismatch");
  if (y0.empty()) return 0.0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.values.rows(); ++r) {
    const auto row = logits.values.row(r);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(y0[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<double>(y0.size());
}

/// One gradient tensor per model tensor.
struct Gradients {
  std::vector<ad::Matrix> tensors;

  static Gradients zeros_like(const Denoiser& m) {
    Gradients g;
    g.tensors.reserve(m.num_tensors());
    for (const auto& t : m.tensors()) g.tensors.push_back(ad::Matrix::Zero(t.rows(), t.cols()));
    return g;
  }

  void add(const Gradients& o) {
    if (o.tensors.size() != tensors.size()) throw Error("gradient shape mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += o.tensors[i];
  }

  void scale(double s) {
    for (auto& t : tensors) t *= s;
  }
};

struct LossOptions {
  /// Average only over positions that are [MASK] in the decoder input.
  bool masked_only = false;
  /// Non-null enables dropout using this stream.
  Rng* dropout_rng = nullptr;
};

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Reconstruction loss of y0 from (yt, cond) and its gradient w.r.t. every tensor.
inline LossAndGradients loss_and_gradients(const Denoiser& model, const TokenSequence& cond,
                                           const TokenSequence& yt, const TokenSequence& y0,
                                           std::optional<int> t = std::nullopt,
                                           const LossOptions& opts = {}) {
  if (yt.size() != y0.size()) throw Error("length mismatch");
  if (y0.contains(Vocabulary::kMaskId)) throw Error("target contains mask");
  ad::Tape tape(true);
  ForwardPass fp(model, tape, opts.dropout_rng);
  auto enc = fp.encode(cond);
  ad::Var logits = fp.decode(yt, enc, t);
  std::vector<int> targets(y0.begin(), y0.end());
  std::vector<double> weights(targets.size(), 1.0);
  if (opts.masked_only) {
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = yt[i] == Vocabulary::kMaskId ? 1.0 : 0.0;
  }
  ad::Var loss = ad::cross_entropy(tape, logits, targets, weights);
  tape.backward(loss);

  LossAndGradients out;
  out.loss = tape.value(loss)(0, 0);
  out.grads = Gradients::zeros_like(model);
  for (std::size_t i = 0; i < model.num_tensors(); ++i) {
    const ad::Var v = fp.touched(i);
    if (!v.valid()) continue;
    if (const ad::Matrix* g = tape.grad(v)) out.grads.tensors[i] = *g;
  }
  return out;
}

}  // namespace dnat
