#pragma once

// Meta-learning of a shared covariate representation. Each task is split by
// treatment arm into two sub-tasks; an encoder h and meta head f are trained
// with inner per-sub-task adaptation steps and first-order outer updates.
// Stream discipline (part of the determinism contract): iteration t draws its
// sub-task batch from derive("iter/<t>") and the inner/outer index split of
// batch slot i from derive("iter/<t>/split/<i>").

#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "covrep/data.hpp"
#include "covrep/matrix.hpp"
#include "covrep/mlp.hpp"
#include "covrep/rng.hpp"

namespace covrep {

struct SubTask {
  int parent_id = 0;
  int arm = 0;  // -1 for propensity sub-tasks, which are not arm-split
  Matrix x;     // n x d
  std::vector<double> y;

  int n() const { return x.rows; }
};

enum class HeadClass { Linear, TanhMlp };

struct MetaConfig {
  int s = 50;
  double inner_rate = 0.01;          // adaptation rate
  double outer_rate_head = 0.001;    // meta-head update rate
  double outer_rate_encoder = 0.001; // encoder update rate
  int batch_tasks = 8;
  int inner_shots = 32;
  int meta_iters = 5000;
  HeadClass head_class = HeadClass::TanhMlp;
  int inner_steps_adapt = 100;
  std::vector<int> encoder_hidden = {128, 128, 128};
  std::vector<int> head_hidden = {64, 64};
  bool second_order_fd = false;  // exact outer gradients, toy sizes only
  double divergence_cap = 1e6;
  int checkpoint_every = 500;
};

struct MetaModel {
  MlpParams encoder;  // d -> s, ReLU hidden
  MlpParams head;     // s -> 1
};

inline MetaModel init_meta_model(int input_dim, const MetaConfig& cfg, Rng rng,
                                 bool sigmoid_head = false) {
  if (cfg.s < 1) throw std::invalid_argument("meta config: s must be >= 1");
  if (cfg.batch_tasks < 1)
    throw std::invalid_argument("meta config: batch_tasks must be >= 1");
  if (cfg.inner_rate < 0 || cfg.outer_rate_head < 0 || cfg.outer_rate_encoder < 0)
    throw std::invalid_argument("meta config: rates must be >= 0");
  MetaModel m;
  std::vector<int> edims;
  edims.push_back(input_dim);
  for (int w : cfg.encoder_hidden) edims.push_back(w);
  edims.push_back(cfg.s);
  Rng re = rng.derive("init/encoder");
  m.encoder = glorot_init(edims, Act::ReLU, Act::Identity, re);

  std::vector<int> hdims;
  hdims.push_back(cfg.s);
  if (cfg.head_class == HeadClass::TanhMlp)
    for (int w : cfg.head_hidden) hdims.push_back(w);
  hdims.push_back(1);
  Rng rh = rng.derive("init/head");
  m.head = glorot_init(hdims, Act::Tanh,
                       sigmoid_head ? Act::Sigmoid : Act::Identity, rh);
  return m;
}

// Splits each task into its treated and control arm; one-armed tasks are
// dropped with a warning.
inline std::vector<SubTask> split_tasks(const std::vector<Task>& tasks) {
  std::vector<SubTask> out;
  for (const Task& t : tasks) {
    int n1 = 0;
    for (const Sample& s : t.samples) n1 += s.i;
    const int n0 = t.n() - n1;
    if (n1 == 0 || n0 == 0) {
      std::fprintf(stderr,
                   "split_tasks: task %d is entirely one-armed, dropped\n",
                   t.id);
      continue;
    }
    for (int arm : {1, 0}) {
      SubTask st;
      st.parent_id = t.id;
      st.arm = arm;
      const int rows = arm == 1 ? n1 : n0;
      st.x = Matrix(rows, t.d_k);
      st.y.resize(rows);
      int r = 0;
      for (const Sample& s : t.samples) {
        if (s.i != arm) continue;
        for (int j = 0; j < t.d_k; ++j) st.x(r, j) = s.x[j];
        st.y[r] = s.y;
        ++r;
      }
      out.push_back(std::move(st));
    }
  }
  return out;
}

// One sub-task per task for propensity training: targets are the indicators.
inline std::vector<SubTask> propensity_subtasks(const std::vector<Task>& tasks) {
  std::vector<SubTask> out;
  for (const Task& t : tasks) {
    SubTask st;
    st.parent_id = t.id;
    st.arm = -1;
    st.x = covariate_matrix(t);
    st.y.resize(t.n());
    for (int i = 0; i < t.n(); ++i) st.y[i] = double(t.samples[i].i);
    out.push_back(std::move(st));
  }
  return out;
}

// Sum of squared residuals of f(h(X)) against y.
inline double task_loss(const MlpParams& head, const MlpParams& encoder,
                        const Matrix& X, const std::vector<double>& y) {
  if (X.rows == 0) {
    std::fprintf(stderr, "task_loss: empty batch\n");
    return 0.0;
  }
  Matrix pred = forward_batch(head, forward_batch(encoder, X));
  double loss = 0.0;
  for (int i = 0; i < X.rows; ++i) {
    const double r = pred(i, 0) - y[i];
    loss += r * r;
  }
  return loss;
}

inline double task_loss(const MlpParams& head, const MlpParams& encoder,
                        const SubTask& st) {
  return task_loss(head, encoder, st.x, st.y);
}

namespace detail {

inline Matrix take_rows(const Matrix& X, const std::vector<int>& idx) {
  Matrix out(int(idx.size()), X.cols);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < X.cols; ++j) out(int(i), j) = X(idx[i], j);
  return out;
}

// Head-only gradient of the summed squared loss on (H, y); also reports the
// loss and the gradient w.r.t. H when requested.
inline double head_loss_grad(const MlpParams& head, const Matrix& H,
                             const std::vector<double>& y,
                             GradientBundle* grads, Matrix* d_h) {
  ForwardTrace t = forward_trace(head, H);
  const Matrix& pred = t.post.back();
  double loss = 0.0;
  Matrix up(H.rows, 1);
  for (int i = 0; i < H.rows; ++i) {
    const double r = pred(i, 0) - y[i];
    loss += r * r;
    up(i, 0) = 2.0 * r;
  }
  if (grads != nullptr || d_h != nullptr) {
    BackpropResult br = backward_batch(head, t, std::move(up));
    if (grads != nullptr) *grads = std::move(br.grads);
    if (d_h != nullptr) *d_h = std::move(br.d_input);
  }
  return loss;
}

}  // namespace detail

struct InnerSplit {
  std::vector<int> inner;  // adaptation points
  std::vector<int> outer;  // everything else, used for the meta update
};

inline InnerSplit draw_inner_split(int n, int shots, Rng& rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  InnerSplit sp;
  const int take = shots < n ? shots : n;
  sp.inner.assign(idx.begin(), idx.begin() + take);
  sp.outer.assign(idx.begin() + take, idx.end());
  return sp;
}

// Adapted head: inner_steps_adapt gradient steps at inner_rate on the mean
// squared residual over the full sub-task, encoder frozen. The mean keeps the
// step geometry independent of the sub-task size; the meta update inside
// maml_train uses the raw summed gradients.
inline MlpParams adapt(const MetaModel& model, const SubTask& st,
                       const MetaConfig& cfg) {
  if (st.n() == 0) throw std::invalid_argument("adapt: empty sub-task");
  Matrix H = forward_batch(model.encoder, st.x);
  MlpParams head = model.head;
  const double scale = 1.0 / double(st.n());
  for (int step = 0; step < cfg.inner_steps_adapt; ++step) {
    GradientBundle g;
    detail::head_loss_grad(head, H, st.y, &g, nullptr);
    g.scale(scale);
    if (!g.finite()) throw std::runtime_error("adapt: non-finite gradient");
    sgd_step_inplace(head, g, cfg.inner_rate);
  }
  return head;
}

// Mean post-adaptation loss over the sub-tasks (1/(2K) sum for 2K of them).
inline double meta_loss(const MetaModel& model,
                        const std::vector<SubTask>& subtasks,
                        const MetaConfig& cfg) {
  if (subtasks.empty())
    throw std::invalid_argument("meta_loss: need at least one sub-task");
  double acc = 0.0;
  for (const SubTask& st : subtasks)
    acc += task_loss(adapt(model, st, cfg), model.encoder, st);
  return acc / double(subtasks.size());
}

using CheckpointFn = std::function<void(int iter, const MetaModel&)>;

namespace detail {

struct OuterGrads {
  GradientBundle head;
  GradientBundle encoder;
  double loss = 0.0;
};

// First-order pass for one sub-task draw: inner step on the inner rows, then
// gradients of the outer-row loss with the adapted head, treating the
// adapted parameters as plain variables.
inline void accumulate_first_order(const MetaModel& m, const MetaConfig& cfg,
                                   const SubTask& st, const InnerSplit& sp,
                                   OuterGrads& acc) {
  if (sp.outer.empty()) return;
  ForwardTrace et = forward_trace(m.encoder, st.x);
  const Matrix& H = et.post.back();

  MlpParams adapted = m.head;
  {
    Matrix Hi = take_rows(H, sp.inner);
    std::vector<double> yi(sp.inner.size());
    for (std::size_t i = 0; i < sp.inner.size(); ++i) yi[i] = st.y[sp.inner[i]];
    GradientBundle gi;
    head_loss_grad(adapted, Hi, yi, &gi, nullptr);
    sgd_step_inplace(adapted, gi, cfg.inner_rate);
  }

  Matrix Ho = take_rows(H, sp.outer);
  std::vector<double> yo(sp.outer.size());
  for (std::size_t i = 0; i < sp.outer.size(); ++i) yo[i] = st.y[sp.outer[i]];
  GradientBundle gh;
  Matrix dHo;
  acc.loss += head_loss_grad(adapted, Ho, yo, &gh, &dHo);
  acc.head.add_scaled(gh, 1.0);

  // route the outer-row gradient back through the encoder
  Matrix dH(H.rows, H.cols);
  for (std::size_t i = 0; i < sp.outer.size(); ++i)
    for (int j = 0; j < H.cols; ++j) dH(sp.outer[i], j) = dHo(int(i), j);
  BackpropResult er = backward_batch(m.encoder, et, std::move(dH));
  acc.encoder.add_scaled(er.grads, 1.0);
}

// Post-adaptation outer loss for one draw, used by the finite-difference mode.
inline double pipeline_loss(const MetaModel& m, const MetaConfig& cfg,
                            const SubTask& st, const InnerSplit& sp) {
  if (sp.outer.empty()) return 0.0;
  Matrix H = forward_batch(m.encoder, st.x);
  MlpParams adapted = m.head;
  {
    Matrix Hi = take_rows(H, sp.inner);
    std::vector<double> yi(sp.inner.size());
    for (std::size_t i = 0; i < sp.inner.size(); ++i) yi[i] = st.y[sp.inner[i]];
    GradientBundle gi;
    head_loss_grad(adapted, Hi, yi, &gi, nullptr);
    sgd_step_inplace(adapted, gi, cfg.inner_rate);
  }
  Matrix Ho = take_rows(H, sp.outer);
  std::vector<double> yo(sp.outer.size());
  for (std::size_t i = 0; i < sp.outer.size(); ++i) yo[i] = st.y[sp.outer[i]];
  return head_loss_grad(adapted, Ho, yo, nullptr, nullptr);
}

inline MetaModel train_loop(const std::vector<SubTask>& subtasks,
                            int input_dim, const MetaConfig& cfg, Rng rng,
                            bool sigmoid_head, const CheckpointFn& checkpoint) {
  if (subtasks.empty())
    throw std::invalid_argument("maml_train: no usable sub-tasks");
  for (const SubTask& st : subtasks)
    if (st.x.cols != input_dim)
      throw std::invalid_argument("maml_train: sub-task dimension mismatch");

  MetaModel m = init_meta_model(input_dim, cfg, rng.derive("init"), sigmoid_head);

  for (int t = 0; t < cfg.meta_iters; ++t) {
    Rng rb = rng.derive("iter/" + std::to_string(t));
    OuterGrads acc;
    acc.head = GradientBundle::zeros_like(m.head);
    acc.encoder = GradientBundle::zeros_like(m.encoder);

    std::vector<std::pair<const SubTask*, InnerSplit>> draws;
    draws.reserve(cfg.batch_tasks);
    for (int i = 0; i < cfg.batch_tasks; ++i) {
      const SubTask& st = subtasks[rb.below(subtasks.size())];
      Rng rs = rng.derive("iter/" + std::to_string(t) + "/split/" +
                          std::to_string(i));
      draws.emplace_back(&st, draw_inner_split(st.n(), cfg.inner_shots, rs));
    }

    if (!cfg.second_order_fd) {
      for (auto& [st, sp] : draws) accumulate_first_order(m, cfg, *st, sp, acc);
    } else {
      auto batch_loss = [&](const MetaModel& mm) {
        double s = 0.0;
        for (auto& [st, sp] : draws) s += pipeline_loss(mm, cfg, *st, sp);
        return s;
      };
      acc.loss = batch_loss(m);
      const double h = 1e-6;
      auto fd_fill = [&](MlpParams& target, GradientBundle& out) {
        std::vector<double> theta = flatten(target);
        std::vector<double> grad(theta.size());
        for (std::size_t j = 0; j < theta.size(); ++j) {
          const double keep = theta[j];
          theta[j] = keep + h;
          unflatten(target, theta);
          const double lp = batch_loss(m);
          theta[j] = keep - h;
          unflatten(target, theta);
          const double lm = batch_loss(m);
          theta[j] = keep;
          unflatten(target, theta);
          grad[j] = (lp - lm) / (2.0 * h);
        }
        std::size_t k = 0;
        for (auto& w : out.d_weights)
          for (auto& v : w.a) v = grad[k++];
        for (auto& b : out.d_biases)
          for (auto& v : b) v = grad[k++];
      };
      fd_fill(m.head, acc.head);
      fd_fill(m.encoder, acc.encoder);
    }

    if (!std::isfinite(acc.loss) || acc.loss > cfg.divergence_cap)
      throw std::runtime_error(
          "maml_train: diverged at iteration " + std::to_string(t) +
          " (outer batch loss " + std::to_string(acc.loss) + ")");
    if (!acc.head.finite() || !acc.encoder.finite())
      throw std::runtime_error("maml_train: non-finite gradient at iteration " +
                               std::to_string(t));

    sgd_step_inplace(m.head, acc.head, cfg.outer_rate_head);
    sgd_step_inplace(m.encoder, acc.encoder, cfg.outer_rate_encoder);

    if (checkpoint && cfg.checkpoint_every > 0 &&
        (t + 1) % cfg.checkpoint_every == 0)
      checkpoint(t + 1, m);
  }
  return m;
}

}  // namespace detail

inline MetaModel maml_train(const std::vector<SubTask>& subtasks, int input_dim,
                            const MetaConfig& cfg, Rng rng,
                            const CheckpointFn& checkpoint = nullptr) {
  return detail::train_loop(subtasks, input_dim, cfg, rng, false, checkpoint);
}

// Propensity variant: tasks are not arm-split, targets are the treatment
// indicators and the head ends in a sigmoid.
inline MetaModel maml_train_propensity(const std::vector<Task>& tasks,
                                       int input_dim, const MetaConfig& cfg,
                                       Rng rng,
                                       const CheckpointFn& checkpoint = nullptr) {
  return detail::train_loop(propensity_subtasks(tasks), input_dim, cfg, rng,
                            true, checkpoint);
}

}  // namespace covrep
