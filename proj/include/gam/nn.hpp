#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gam/common.hpp"
#include "gam/rng.hpp"

namespace gam {

enum class Activation { tanh_fn, relu, softplus };

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh_fn;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  throw ConfigError("unknown activation: " + s);
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh_fn: return "tanh";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

inline MatX apply_activation(Activation a, const MatX& z) {
  switch (a) {
    case Activation::tanh_fn: return z.array().tanh();
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::softplus:
      return z.unaryExpr([](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
  }
  return z;
}

// Elementwise activation derivative, recovered from the activation output.
inline MatX activation_grad_from_output(Activation a, const MatX& post) {
  switch (a) {
    case Activation::tanh_fn: return (1.0 - post.array().square()).matrix();
    case Activation::relu: return (post.array() > 0.0).cast<double>().matrix();
    case Activation::softplus: return (1.0 - (-post.array()).exp()).matrix();
  }
  return MatX::Ones(post.rows(), post.cols());
}

struct Linear {
  MatX w;
  VecX b;

  MatX forward(const MatX& x) const {
    MatX y = w * x;
    y.colwise() += b;
    return y;
  }
};

struct LinearGrads {
  MatX dw;
  VecX db;

  static LinearGrads zeros_like(const Linear& l) {
    return {MatX::Zero(l.w.rows(), l.w.cols()), VecX::Zero(l.b.size())};
  }
};

// dL/dy -> accumulate dL/dw, dL/db; optionally produce dL/dx.
inline void linear_backward(const Linear& l, const MatX& x, const MatX& dy, LinearGrads* g,
                            MatX* dx) {
  if (g) {
    g->dw.noalias() += dy * x.transpose();
    g->db.noalias() += dy.rowwise().sum();
  }
  if (dx) dx->noalias() = l.w.transpose() * dy;
}

// Fully connected stack. Hidden layers are activated; the last layer is linear
// unless final_activation is set (used for the decoder trunk, whose output is
// a hidden representation shared by several heads).
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::tanh_fn;
  bool final_activation = false;

  int in_dim() const { return static_cast<int>(layers.front().w.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().w.rows()); }
};

inline Mlp make_mlp(int in, int hidden, int n_hidden, int out, Activation act, Rng& rng,
                    double last_layer_scale = 1.0, bool final_activation = false) {
  Mlp m;
  m.act = act;
  m.final_activation = final_activation;
  std::vector<int> dims;
  dims.push_back(in);
  for (int i = 0; i < n_hidden; ++i) dims.push_back(hidden);
  dims.push_back(out);
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    const double std = std::sqrt(2.0 / (dims[i] + dims[i + 1]));
    const double scale = (i + 2 == dims.size()) ? last_layer_scale : 1.0;
    Linear l;
    l.w = rng.normal_mat(dims[i + 1], dims[i], std * scale);
    l.b = VecX::Zero(dims[i + 1]);
    m.layers.push_back(std::move(l));
  }
  return m;
}

struct MlpCache {
  MatX input;
  std::vector<MatX> post;  // output of every layer, activation applied where due
};

inline MatX mlp_forward(const Mlp& m, const MatX& x, MlpCache* cache = nullptr) {
  if (x.rows() != m.in_dim()) throw DimensionError("mlp_forward: input dimension mismatch");
  if (cache) {
    cache->input = x;
    cache->post.clear();
  }
  MatX h = x;
  for (size_t i = 0; i < m.layers.size(); ++i) {
    h = m.layers[i].forward(h);
    if (i + 1 < m.layers.size() || m.final_activation) h = apply_activation(m.act, h);
    if (cache) cache->post.push_back(h);
  }
  return h;
}

struct MlpGrads {
  std::vector<LinearGrads> layers;

  static MlpGrads zeros_like(const Mlp& m) {
    MlpGrads g;
    for (const auto& l : m.layers) g.layers.push_back(LinearGrads::zeros_like(l));
    return g;
  }
};

inline void mlp_backward(const Mlp& m, const MlpCache& cache, const MatX& dy, MlpGrads* grads,
                         MatX* dx) {
  MatX d = dy;
  for (int i = static_cast<int>(m.layers.size()) - 1; i >= 0; --i) {
    const bool activated = (i + 1 < static_cast<int>(m.layers.size())) || m.final_activation;
    if (activated) d = activation_grad_from_output(m.act, cache.post[i]).cwiseProduct(d);
    const MatX& input_i = (i == 0) ? cache.input : cache.post[i - 1];
    MatX d_in;
    linear_backward(m.layers[i], input_i, d, grads ? &grads->layers[i] : nullptr,
                    (i > 0 || dx) ? &d_in : nullptr);
    if (i > 0)
      d = std::move(d_in);
    else if (dx)
      *dx = std::move(d_in);
  }
}

// Flat views over parameters (or their gradients) for the optimizer,
// checkpointing, and finite-difference probes. Span order is stable.
struct ParamSpans {
  std::vector<double*> ptr;
  std::vector<size_t> len;

  void add(MatX& m) {
    ptr.push_back(m.data());
    len.push_back(static_cast<size_t>(m.size()));
  }
  void add(VecX& v) {
    ptr.push_back(v.data());
    len.push_back(static_cast<size_t>(v.size()));
  }
  void add(Mlp& m) {
    for (auto& l : m.layers) {
      add(l.w);
      add(l.b);
    }
  }
  void add(Linear& l) {
    add(l.w);
    add(l.b);
  }
  void add(MlpGrads& g) {
    for (auto& l : g.layers) {
      add(l.dw);
      add(l.db);
    }
  }
  void add(LinearGrads& g) {
    add(g.dw);
    add(g.db);
  }

  size_t count() const {
    size_t n = 0;
    for (size_t l : len) n += l;
    return n;
  }

  double get(size_t flat) const {
    for (size_t s = 0; s < len.size(); ++s) {
      if (flat < len[s]) return ptr[s][flat];
      flat -= len[s];
    }
    throw DimensionError("ParamSpans::get: index out of range");
  }

  void add_to(size_t flat, double delta) {
    for (size_t s = 0; s < len.size(); ++s) {
      if (flat < len[s]) {
        ptr[s][flat] += delta;
        return;
      }
      flat -= len[s];
    }
    throw DimensionError("ParamSpans::add_to: index out of range");
  }

  void set_zero() {
    for (size_t s = 0; s < len.size(); ++s)
      for (size_t i = 0; i < len[s]; ++i) ptr[s][i] = 0.0;
  }

  double squared_norm() const {
    double n = 0;
    for (size_t s = 0; s < len.size(); ++s)
      for (size_t i = 0; i < len[s]; ++i) n += ptr[s][i] * ptr[s][i];
    return n;
  }
};

// Adam with global gradient-norm clipping.
struct AdamState {
  std::vector<VecX> m, v;
  long step = 0;

  static AdamState zeros_like(const ParamSpans& spans) {
    AdamState s;
    for (size_t i = 0; i < spans.len.size(); ++i) {
      s.m.push_back(VecX::Zero(spans.len[i]));
      s.v.push_back(VecX::Zero(spans.len[i]));
    }
    return s;
  }
};

inline void adam_step(ParamSpans& params, const ParamSpans& grads, AdamState& state, double lr,
                      double grad_clip, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (params.len != grads.len) throw DimensionError("adam_step: misaligned spans");
  double scale = 1.0;
  if (grad_clip > 0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > grad_clip) scale = grad_clip / norm;
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t s = 0; s < params.len.size(); ++s) {
    for (size_t i = 0; i < params.len[s]; ++i) {
      const double g = scale * grads.ptr[s][i];
      double& m = state.m[s][i];
      double& v = state.v[s][i];
      m = beta1 * m + (1 - beta1) * g;
      v = beta2 * v + (1 - beta2) * g * g;
      params.ptr[s][i] -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
    }
  }
}

}  // namespace gam
