#pragma once

// Dense MLP with exact reverse-mode gradients. Everything is plain structs
// over Matrix so a network is cheap to copy, and the batched passes are the
// GEMM kernels from matrix.hpp. backward_batch also returns the gradient
// with respect to the input batch, which is how a head chains into the
// encoder feeding it.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "covrep/matrix.hpp"
#include "covrep/rng.hpp"

namespace covrep {

enum class Act { ReLU, Tanh, Identity, Sigmoid };

struct MlpParams {
  std::vector<int> layer_dims;
  std::vector<Matrix> weights;               // weights[l]: dims[l+1] x dims[l]
  std::vector<std::vector<double>> biases;   // biases[l]: dims[l+1]
  Act hidden_act = Act::ReLU;
  Act output_act = Act::Identity;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  int num_layers() const { return int(weights.size()); }
};

struct GradientBundle {
  std::vector<Matrix> d_weights;
  std::vector<std::vector<double>> d_biases;

  static GradientBundle zeros_like(const MlpParams& p) {
    GradientBundle g;
    for (const auto& w : p.weights) g.d_weights.emplace_back(w.rows, w.cols);
    for (const auto& b : p.biases) g.d_biases.emplace_back(b.size(), 0.0);
    return g;
  }

  void add_scaled(const GradientBundle& o, double c) {
    for (std::size_t l = 0; l < d_weights.size(); ++l) {
      for (std::size_t i = 0; i < d_weights[l].a.size(); ++i)
        d_weights[l].a[i] += c * o.d_weights[l].a[i];
      for (std::size_t i = 0; i < d_biases[l].size(); ++i)
        d_biases[l][i] += c * o.d_biases[l][i];
    }
  }

  void scale(double c) {
    for (auto& w : d_weights)
      for (auto& v : w.a) v *= c;
    for (auto& b : d_biases)
      for (auto& v : b) v *= c;
  }

  bool finite() const {
    for (const auto& w : d_weights)
      for (double v : w.a)
        if (!std::isfinite(v)) return false;
    for (const auto& b : d_biases)
      for (double v : b)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

inline MlpParams glorot_init(std::vector<int> layer_dims, Act hidden,
                             Act output, Rng& rng) {
  if (layer_dims.size() < 2)
    throw std::invalid_argument("glorot_init: need at least input and output dims");
  MlpParams p;
  p.layer_dims = std::move(layer_dims);
  p.hidden_act = hidden;
  p.output_act = output;
  for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
    const int fan_in = p.layer_dims[l];
    const int fan_out = p.layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (auto& v : w.a) v = rng.uniform(-limit, limit);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(fan_out, 0.0);
  }
  return p;
}

namespace detail {

inline void apply_act(Act act, Matrix& z) {
  switch (act) {
    case Act::Identity:
      return;
    case Act::ReLU:
      for (auto& v : z.a)
        if (v < 0.0) v = 0.0;
      return;
    case Act::Tanh:
      for (auto& v : z.a) v = std::tanh(v);
      return;
    case Act::Sigmoid:
      for (auto& v : z.a) v = 1.0 / (1.0 + std::exp(-v));
      return;
  }
}

// Multiplies `delta` elementwise by act'(pre) using pre- and post-activation.
inline void apply_act_grad(Act act, const Matrix& pre, const Matrix& post,
                           Matrix& delta) {
  switch (act) {
    case Act::Identity:
      return;
    case Act::ReLU:
      for (std::size_t i = 0; i < delta.a.size(); ++i)
        if (pre.a[i] <= 0.0) delta.a[i] = 0.0;
      return;
    case Act::Tanh:
      for (std::size_t i = 0; i < delta.a.size(); ++i)
        delta.a[i] *= 1.0 - post.a[i] * post.a[i];
      return;
    case Act::Sigmoid:
      for (std::size_t i = 0; i < delta.a.size(); ++i)
        delta.a[i] *= post.a[i] * (1.0 - post.a[i]);
      return;
  }
}

inline void add_bias_rows(Matrix& z, const std::vector<double>& b) {
  for (int i = 0; i < z.rows; ++i) {
    double* zi = z.row(i);
    for (int j = 0; j < z.cols; ++j) zi[j] += b[j];
  }
}

}  // namespace detail

struct ForwardTrace {
  std::vector<Matrix> pre;   // pre[l]: n x dims[l+1], before activation
  std::vector<Matrix> post;  // post[0] = input; post[l+1]: layer l output
};

inline ForwardTrace forward_trace(const MlpParams& p, const Matrix& X) {
  if (X.cols != p.input_dim())
    throw std::invalid_argument("forward: input width != layer_dims[0]");
  ForwardTrace t;
  t.post.push_back(X);
  for (int l = 0; l < p.num_layers(); ++l) {
    Matrix z = matmul_nt(t.post.back(), p.weights[l]);
    detail::add_bias_rows(z, p.biases[l]);
    t.pre.push_back(z);
    detail::apply_act(l + 1 == p.num_layers() ? p.output_act : p.hidden_act, z);
    t.post.push_back(std::move(z));
  }
  return t;
}

inline Matrix forward_batch(const MlpParams& p, const Matrix& X) {
  if (X.cols != p.input_dim())
    throw std::invalid_argument("forward: input width != layer_dims[0]");
  Matrix cur = X;
  for (int l = 0; l < p.num_layers(); ++l) {
    Matrix z = matmul_nt(cur, p.weights[l]);
    detail::add_bias_rows(z, p.biases[l]);
    detail::apply_act(l + 1 == p.num_layers() ? p.output_act : p.hidden_act, z);
    cur = std::move(z);
  }
  return cur;
}

inline std::vector<double> forward(const MlpParams& p,
                                   const std::vector<double>& x) {
  Matrix X(1, int(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) X(0, int(j)) = x[j];
  Matrix out = forward_batch(p, X);
  return out.a;
}

struct BackpropResult {
  GradientBundle grads;  // summed over the batch
  Matrix d_input;        // n x input_dim
};

// upstream: dLoss/d(output) per row of the traced batch.
inline BackpropResult backward_batch(const MlpParams& p, const ForwardTrace& t,
                                     Matrix upstream) {
  BackpropResult r;
  r.grads = GradientBundle::zeros_like(p);
  Matrix delta = std::move(upstream);
  for (int l = p.num_layers() - 1; l >= 0; --l) {
    detail::apply_act_grad(l + 1 == p.num_layers() ? p.output_act : p.hidden_act,
                           t.pre[l], t.post[l + 1], delta);
    matmul_tn_acc(delta, t.post[l], r.grads.d_weights[l]);
    auto& db = r.grads.d_biases[l];
    for (int i = 0; i < delta.rows; ++i) {
      const double* di = delta.row(i);
      for (int j = 0; j < delta.cols; ++j) db[j] += di[j];
    }
    if (l > 0)
      delta = matmul(delta, p.weights[l]);
    else
      r.d_input = matmul(delta, p.weights[0]);
  }
  return r;
}

// Squared-error loss summed over outputs of one point; exact gradients.
inline std::pair<double, GradientBundle> backward(
    const MlpParams& p, const std::vector<double>& x,
    const std::vector<double>& target) {
  if (int(target.size()) != p.output_dim())
    throw std::invalid_argument("backward: target width != output dim");
  Matrix X(1, int(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) X(0, int(j)) = x[j];
  ForwardTrace t = forward_trace(p, X);
  const Matrix& out = t.post.back();
  double loss = 0.0;
  Matrix up(1, out.cols);
  for (int j = 0; j < out.cols; ++j) {
    const double resid = out(0, j) - target[j];
    loss += resid * resid;
    up(0, j) = 2.0 * resid;
  }
  return {loss, backward_batch(p, t, std::move(up)).grads};
}

inline MlpParams sgd_step(const MlpParams& p, const GradientBundle& g,
                          double rate) {
  if (rate < 0.0) throw std::invalid_argument("sgd_step: rate must be >= 0");
  MlpParams out = p;
  for (int l = 0; l < out.num_layers(); ++l) {
    for (std::size_t i = 0; i < out.weights[l].a.size(); ++i)
      out.weights[l].a[i] -= rate * g.d_weights[l].a[i];
    for (std::size_t i = 0; i < out.biases[l].size(); ++i)
      out.biases[l][i] -= rate * g.d_biases[l][i];
  }
  return out;
}

inline void sgd_step_inplace(MlpParams& p, const GradientBundle& g,
                             double rate) {
  for (int l = 0; l < p.num_layers(); ++l) {
    for (std::size_t i = 0; i < p.weights[l].a.size(); ++i)
      p.weights[l].a[i] -= rate * g.d_weights[l].a[i];
    for (std::size_t i = 0; i < p.biases[l].size(); ++i)
      p.biases[l][i] -= rate * g.d_biases[l][i];
  }
}

inline std::size_t param_count(const MlpParams& p) {
  std::size_t n = 0;
  for (const auto& w : p.weights) n += w.a.size();
  for (const auto& b : p.biases) n += b.size();
  return n;
}

inline std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> v;
  v.reserve(param_count(p));
  for (const auto& w : p.weights) v.insert(v.end(), w.a.begin(), w.a.end());
  for (const auto& b : p.biases) v.insert(v.end(), b.begin(), b.end());
  return v;
}

inline void unflatten(MlpParams& p, const std::vector<double>& v) {
  std::size_t k = 0;
  for (auto& w : p.weights)
    for (auto& x : w.a) x = v[k++];
  for (auto& b : p.biases)
    for (auto& x : b) x = v[k++];
  if (k != v.size()) throw std::invalid_argument("unflatten: length mismatch");
}

inline std::vector<double> flatten(const GradientBundle& g) {
  std::vector<double> v;
  for (const auto& w : g.d_weights) v.insert(v.end(), w.a.begin(), w.a.end());
  for (const auto& b : g.d_biases) v.insert(v.end(), b.begin(), b.end());
  return v;
}

inline bool params_finite(const MlpParams& p) {
  for (const auto& w : p.weights)
    for (double v : w.a)
      if (!std::isfinite(v)) return false;
  for (const auto& b : p.biases)
    for (double v : b)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace covrep
