#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

#include "dnat/error.hpp"

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns an append-only list of nodes. Each op computes its value
// eagerly and, when recording and at least one input needs a gradient,
// stores a closure that maps the node's output gradient to its inputs.
// Parameters enter as leaves that reference external storage.

namespace dnat::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

  bool recording() const noexcept { return record_; }

  Var constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to caller-owned storage that must outlive the tape.
  Var leaf(const Matrix& storage, bool requires_grad = true) {
    Node n;
    n.external = &storage;
    n.requires_grad = requires_grad && record_;
    return push(std::move(n));
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Records an op result. The closure runs only if the result needs a gradient.
  Var record(Matrix value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    if (record_ && needs_grad) {
      n.requires_grad = true;
      n.backward = std::move(backward);
    }
    return push(std::move(n));
  }

  /// Gradient buffer for an input, zero-initialized on first touch.
  Matrix& grad_buffer(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      const Matrix& val = n.external ? *n.external : n.value;
      n.grad = Matrix::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  void backward(Var root) {
    if (!record_) throw Error("backward on a non-recording tape");
    const Matrix& rv = value(root);
    if (rv.rows() != 1 || rv.cols() != 1) throw Error("backward root must be a scalar");
    if (!requires_grad(root)) return;
    grad_buffer(root)(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient accumulated at a node, or nullptr if none reached it.
  const Matrix* grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.grad.size() == 0 ? nullptr : &n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool record_;
};

inline bool any_grad(const Tape& t, Var a) { return t.requires_grad(a); }
inline bool any_grad(const Tape& t, Var a, Var b) { return t.requires_grad(a) || t.requires_grad(b); }
inline bool any_grad(const Tape& t, Var a, Var b, Var c) {
  return t.requires_grad(a) || t.requires_grad(b) || t.requires_grad(c);
}

/// a * b
inline Var matmul(Tape& t, Var a, Var b) {
  Matrix out;
  out.noalias() = t.value(a) * t.value(b);
  return t.record(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += tp.value(a).transpose() * g;
  });
}

/// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  Matrix out;
  out.noalias() = t.value(a) * t.value(b).transpose();
  return t.record(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.grad_buffer(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad_buffer(b).noalias() += g.transpose() * tp.value(a);
  });
}

inline Var add(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) + t.value(b);
  return t.record(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

/// a + broadcast of a 1 x d row over every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a);
  out.rowwise() += t.value(row).row(0);
  return t.record(std::move(out), any_grad(t, a, row), [a, row](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(row)) tp.grad_buffer(row).row(0) += g.colwise().sum();
  });
}

/// x W + b for a row-vector bias.
inline Var affine(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

/// Element-wise product with a constant matrix (dropout masks).
inline Var scale_by(Tape& t, Var a, Matrix factor) {
  Matrix out = t.value(a).cwiseProduct(factor);
  return t.record(std::move(out), any_grad(t, a),
                  [a, f = std::move(factor)](Tape& tp, const Matrix& g) {
                    tp.accumulate(a, g.cwiseProduct(f));
                  });
}

/// Rows table[ids[i]].
inline Var gather_rows(Tape& t, Var table, const std::vector<int>& ids) {
  const Matrix& tab = t.value(table);
  Matrix out(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tab.rows()) throw Error("id out of range");
    out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
  }
  return t.record(std::move(out), any_grad(t, table), [table, ids](Tape& tp, const Matrix& g) {
    Matrix& gt = tp.grad_buffer(table);
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

/// Leading n rows.
inline Var top_rows(Tape& t, Var a, Eigen::Index n) {
  Matrix out = t.value(a).topRows(n);
  return t.record(std::move(out), any_grad(t, a), [a, n](Tape& tp, const Matrix& g) {
    tp.grad_buffer(a).topRows(n) += g;
  });
}

/// Row-wise layer normalization with learned scale and offset (1 x d each).
inline Var layer_norm(Tape& t, Var x, Var scale, Var offset, double eps = 1e-5) {
  const Matrix& xv = t.value(x);
  const Eigen::Index rows = xv.rows();
  const Eigen::Index d = xv.cols();
  Matrix xhat(rows, d);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= t.value(scale).row(0).array();
  out.rowwise() += t.value(offset).row(0);
  const bool need = any_grad(t, x, scale, offset);
  if (!need || !t.recording()) return t.record(std::move(out), false, {});
  return t.record(std::move(out), true,
                  [x, scale, offset, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(scale)) {
                      tp.grad_buffer(scale).row(0) += g.cwiseProduct(xhat).colwise().sum();
                    }
                    if (tp.requires_grad(offset)) tp.grad_buffer(offset).row(0) += g.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    Matrix dxhat = g;
                    dxhat.array().rowwise() *= tp.value(scale).row(0).array();
                    Matrix& gx = tp.grad_buffer(x);
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      const double m1 = dxhat.row(r).mean();
                      const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                      gx.row(r).array() +=
                          inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  });
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

/// Exact GELU, x Phi(x).
inline Var gelu(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  Matrix out = xv.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  return t.record(std::move(out), any_grad(t, x), [x](Tape& tp, const Matrix& g) {
    const Matrix& xv2 = tp.value(x);
    Matrix d = xv2.unaryExpr([](double v) {
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi * kInvSqrt2;
      return cdf + v * pdf;
    });
    tp.accumulate(x, g.cwiseProduct(d));
  });
}

/// Multi-head scaled dot-product attention without a causal mask.
///
/// q is n x d, k and v are m x d; heads split the d columns evenly. Keys with
/// key_valid[j] == 0 receive no weight. A query row with no valid key gets a
/// zero output.
inline Var attention(Tape& t, Var q, Var k, Var v, const std::vector<char>& key_valid, int heads) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  const Eigen::Index n = qv.rows();
  const Eigen::Index m = kv.rows();
  const Eigen::Index d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != m) throw Error("attention shape mismatch");
  if (static_cast<Eigen::Index>(key_valid.size()) != m) throw Error("attention mask size mismatch");
  const Eigen::Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool any_valid = std::find(key_valid.begin(), key_valid.end(), 1) != key_valid.end();

  Matrix out = Matrix::Zero(n, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix& p = probs[static_cast<std::size_t>(h)];
    p = Matrix::Zero(n, m);
    if (!any_valid) continue;
    Matrix s;
    s.noalias() = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) {
        if (key_valid[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j) * scale);
      }
      double z = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        if (!key_valid[static_cast<std::size_t>(j)]) continue;
        const double e = std::exp(s(i, j) * scale - mx);
        p(i, j) = e;
        z += e;
      }
      p.row(i) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = p * vv.middleCols(h * dh, dh);
  }
  const bool need = any_grad(t, q, k, v);
  if (!need || !t.recording()) return t.record(std::move(out), false, {});
  return t.record(std::move(out), true,
                  [q, k, v, heads, dh, scale, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                    const Matrix& qv2 = tp.value(q);
                    const Matrix& kv2 = tp.value(k);
                    const Matrix& vv2 = tp.value(v);
                    Matrix gq = Matrix::Zero(qv2.rows(), qv2.cols());
                    Matrix gk = Matrix::Zero(kv2.rows(), kv2.cols());
                    Matrix gv = Matrix::Zero(vv2.rows(), vv2.cols());
                    for (int h = 0; h < heads; ++h) {
                      const Matrix& p = probs[static_cast<std::size_t>(h)];
                      const auto go = g.middleCols(h * dh, dh);
                      gv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
                      Matrix dp;
                      dp.noalias() = go * vv2.middleCols(h * dh, dh).transpose();
                      Matrix ds = p.cwiseProduct(dp);
                      const Eigen::VectorXd row_dot = ds.rowwise().sum();
                      ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
                      ds *= scale;
                      gq.middleCols(h * dh, dh).noalias() += ds * kv2.middleCols(h * dh, dh);
                      gk.middleCols(h * dh, dh).noalias() += ds.transpose() * qv2.middleCols(h * dh, dh);
                    }
                    tp.accumulate(q, gq);
                    tp.accumulate(k, gk);
                    tp.accumulate(v, gv);
                  });
}

/// Sets the listed columns to -inf; no gradient flows through them.
inline Var suppress_columns(Tape& t, Var a, const std::vector<int>& cols) {
  Matrix out = t.value(a);
  for (int c : cols) out.col(c).setConstant(-std::numeric_limits<double>::infinity());
  return t.record(std::move(out), any_grad(t, a), [a, cols](Tape& tp, const Matrix& g) {
    Matrix gg = g;
    for (int c : cols) gg.col(c).setZero();
    tp.accumulate(a, gg);
  });
}

/// Weighted mean negative log-softmax at the target column of each row.
/// Rows with zero weight are ignored; an all-zero weight vector yields 0.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                         const std::vector<double>& weights) {
  const Matrix& x = t.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != x.rows() || weights.size() != targets.size()) {
    throw Error("length mismatch");
  }
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  Matrix probs(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    probs.row(r) = (x.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    const double lse = mx + std::log(z);
    if (weights[static_cast<std::size_t>(r)] != 0.0) {
      loss += weights[static_cast<std::size_t>(r)] * (lse - x(r, targets[static_cast<std::size_t>(r)]));
    }
  }
  const double norm = wsum > 0.0 ? 1.0 / wsum : 0.0;
  Matrix out(1, 1);
  out(0, 0) = loss * norm;
  return t.record(std::move(out), any_grad(t, logits),
                  [logits, targets, weights, norm, probs = std::move(probs)](Tape& tp, const Matrix& g) {
                    Matrix gl = probs;
                    for (Eigen::Index r = 0; r < gl.rows(); ++r) {
                      gl(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
                      gl.row(r) *= weights[static_cast<std::size_t>(r)] * norm * g(0, 0);
                    }
                    tp.accumulate(logits, gl);
                  });
}

}  // namespace dnat::ad
