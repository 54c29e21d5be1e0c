#pragma once

#include <cmath>

#include "dnat/error.hpp"
#include "dnat/model.hpp"

namespace dnat {

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// First/second moment estimates and the number of completed updates.
struct AdamState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  long step = 0;

  static AdamState zeros_like(const Denoiser& model) {
    AdamState s;
    for (const auto& t : model.tensors()) {
      s.m.push_back(ad::Matrix::Zero(t.rows(), t.cols()));
      s.v.push_back(ad::Matrix::Zero(t.rows(), t.cols()));
    }
    return s;
  }

  friend bool operator==(const AdamState& a, const AdamState& b) {
    return a.step == b.step && a.m == b.m && a.v == b.v;
  }
};

/// AdamW with decoupled weight decay:
///   p <- p (1 - lr wd)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p - lr mhat / (sqrt(vhat) + eps),  mhat = m / (1 - b1^k), vhat = v / (1 - b2^k)
inline void adamw_step(Denoiser& model, const Gradients& grads, AdamState& state,
                       const AdamOptions& opt) {
  const std::size_t n = model.num_tensors();
  if (grads.tensors.size() != n || state.m.size() != n || state.v.size() != n) {
    throw Error("optimizer shape mismatch");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = model.tensor(i);
    if (grads.tensors[i].rows() != p.rows() || grads.tensors[i].cols() != p.cols() ||
        state.m[i].rows() != p.rows() || state.m[i].cols() != p.cols() ||
        state.v[i].rows() != p.rows() || state.v[i].cols() != p.cols()) {
      throw Error("optimizer shape mismatch for " + model.name(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    auto p = model.tensor(i).array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = grads.tensors[i].array();
    if (opt.weight_decay != 0.0) p *= (1.0 - opt.lr * opt.weight_decay);
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.square();
    p -= opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps);
  }
}

}  // namespace dnat
