#pragma once

// Synthetic multi-task causal data. A shared ground-truth representation
// h*: R^d -> R^r feeds per-task, per-arm outcome functions; treatment is
// assigned by a fixed probability or a random neural propensity. Potential
// outcomes are stored on every sample (noise baked in per arm), so oracle
// effect quantities stay computable.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "covrep/data.hpp"
#include "covrep/matrix.hpp"
#include "covrep/mlp.hpp"
#include "covrep/rng.hpp"

namespace covrep {

enum class RepKind { FullVariables, VariableSelection, LinearCombination, NeuralNetwork };

struct GroundTruthRep {
  RepKind kind = RepKind::FullVariables;
  int d = 0;
  int r = 0;
  std::vector<int> selection;  // VariableSelection: sorted distinct columns
  Matrix linear;               // LinearCombination: r x d, full row rank
  MlpParams net;               // NeuralNetwork

  Matrix eval_batch(const Matrix& X) const {
    if (X.cols != d) throw std::invalid_argument("rep eval: wrong input dim");
    switch (kind) {
      case RepKind::FullVariables:
        return X;
      case RepKind::VariableSelection: {
        Matrix H(X.rows, r);
        for (int i = 0; i < X.rows; ++i)
          for (int j = 0; j < r; ++j) H(i, j) = X(i, selection[j]);
        return H;
      }
      case RepKind::LinearCombination:
        return matmul_nt(X, linear);
      case RepKind::NeuralNetwork:
        return forward_batch(net, X);
    }
    throw std::logic_error("rep eval: unknown kind");
  }

  std::vector<double> eval(const std::vector<double>& x) const {
    Matrix X(1, int(x.size()));
    for (std::size_t j = 0; j < x.size(); ++j) X(0, int(j)) = x[j];
    return eval_batch(X).a;
  }
};

inline GroundTruthRep gen_representation(RepKind kind, int d, int r, Rng rng) {
  if (kind == RepKind::FullVariables) r = d;
  if (r < 1 || r > d)
    throw std::domain_error("gen_representation: need 1 <= r <= d");
  GroundTruthRep rep;
  rep.kind = kind;
  rep.d = d;
  rep.r = r;
  switch (kind) {
    case RepKind::FullVariables:
      break;
    case RepKind::VariableSelection: {
      std::vector<int> idx(d);
      for (int j = 0; j < d; ++j) idx[j] = j;
      rng.shuffle(idx);
      rep.selection.assign(idx.begin(), idx.begin() + r);
      std::sort(rep.selection.begin(), rep.selection.end());
      break;
    }
    case RepKind::LinearCombination: {
      // regenerate until the Gram matrix is SPD, i.e. full row rank
      for (;;) {
        rep.linear = Matrix(r, d);
        for (auto& v : rep.linear.a) v = rng.uniform(-1.0, 1.0);
        if (cholesky(matmul_nt(rep.linear, rep.linear)).has_value()) break;
      }
      break;
    }
    case RepKind::NeuralNetwork:
      rep.net = glorot_init({d, 64, 64, r}, Act::Tanh, Act::Identity, rng);
      break;
  }
  return rep;
}

enum class TaskFunctionKind { Logistic, Linear };

struct TaskFunctionParams {
  std::vector<double> a;  // entries in [-1,1], dimension r
  double b = 0.0;         // in [-1,1]
  double noise_sd = 0.1;
  TaskFunctionKind kind = TaskFunctionKind::Logistic;
};

inline TaskFunctionParams draw_task_function(int r, Rng& rng,
                                             TaskFunctionKind kind,
                                             double noise_sd) {
  TaskFunctionParams f;
  f.kind = kind;
  f.noise_sd = noise_sd;
  f.a.resize(r);
  for (auto& v : f.a) v = rng.uniform(-1.0, 1.0);
  f.b = rng.uniform(-1.0, 1.0);
  return f;
}

// Noiseless mean outcome given the representation output h.
inline double mean_outcome(const TaskFunctionParams& f,
                           const double* h, int r) {
  double z = f.b;
  for (int j = 0; j < r; ++j) z += f.a[j] * h[j];
  return f.kind == TaskFunctionKind::Logistic ? 1.0 / (1.0 + std::exp(z)) : z;
}

enum class PropKind { FixedProbability, NeuralPropensity };

struct GroundTruthPropensity {
  PropKind kind = PropKind::FixedProbability;
  double p = 0.5;  // FixedProbability
  MlpParams net;   // NeuralPropensity: Sigmoid output on the covariates

  std::vector<double> eval_batch(const Matrix& X) const {
    std::vector<double> out(X.rows);
    if (kind == PropKind::FixedProbability) {
      if (p <= 0.0 || p >= 1.0)
        throw std::domain_error("propensity: p must be inside (0,1)");
      for (auto& v : out) v = p;
      return out;
    }
    Matrix s = forward_batch(net, X);
    // affine rescale of the sigmoid output enforces overlap
    for (int i = 0; i < X.rows; ++i) out[i] = 0.02 + 0.96 * s(i, 0);
    return out;
  }

  double eval(const std::vector<double>& x) const {
    Matrix X(1, int(x.size()));
    for (std::size_t j = 0; j < x.size(); ++j) X(0, int(j)) = x[j];
    return eval_batch(X)[0];
  }
};

inline GroundTruthPropensity fixed_propensity(double p) {
  if (p <= 0.0 || p >= 1.0)
    throw std::domain_error("fixed_propensity: p must be inside (0,1)");
  GroundTruthPropensity gp;
  gp.kind = PropKind::FixedProbability;
  gp.p = p;
  return gp;
}

inline GroundTruthPropensity neural_propensity(int d, Rng rng) {
  GroundTruthPropensity gp;
  gp.kind = PropKind::NeuralPropensity;
  gp.net = glorot_init({d, 64, 64, 1}, Act::Tanh, Act::Sigmoid, rng);
  // spread the weights so propensities vary meaningfully across units
  for (auto& w : gp.net.weights)
    for (auto& v : w.a) v *= 2.0;
  return gp;
}

// Treatment depends on covariates only, through its own stream; permuting
// potential outcomes and redrawing leaves the indicator sequence unchanged.
inline std::vector<int> assign_treatment(const GroundTruthPropensity& prop,
                                         const Matrix& X, Rng rng) {
  std::vector<double> ps = prop.eval_batch(X);
  std::vector<int> ind(X.rows);
  for (int i = 0; i < X.rows; ++i) ind[i] = rng.bernoulli(ps[i]) ? 1 : 0;
  return ind;
}

struct TaskTruth {
  TaskFunctionParams treated;
  TaskFunctionParams control;
  GroundTruthPropensity prop;
};

struct GeneratedTask {
  Task task;
  TaskTruth truth;
};

// Generates a task with explicit arm functions (the randomized wrapper below
// draws them); covariates are i.i.d. uniform on [-1,1]^d.
inline GeneratedTask gen_task_with(const GroundTruthRep& rep,
                                   const GroundTruthPropensity& prop,
                                   TaskFunctionParams treated,
                                   TaskFunctionParams control, int n,
                                   Rng rng) {
  if (n < 1) throw std::domain_error("gen_task: n must be >= 1");
  Rng rx = rng.derive("x");
  Rng rn1 = rng.derive("noise/1");
  Rng rn0 = rng.derive("noise/0");
  Rng rt = rng.derive("treat");

  Matrix X(n, rep.d);
  for (auto& v : X.a) v = rx.uniform(-1.0, 1.0);
  Matrix H = rep.eval_batch(X);
  std::vector<int> ind = assign_treatment(prop, X, rt);

  GeneratedTask g;
  g.truth = {treated, control, prop};
  g.task.d_k = rep.d;
  g.task.samples.resize(n);
  for (int i = 0; i < n; ++i) {
    Sample& s = g.task.samples[i];
    s.x.assign(X.row(i), X.row(i) + rep.d);
    const double* h = H.row(i);
    s.y1 = mean_outcome(treated, h, rep.r) +
           (treated.noise_sd > 0 ? rn1.normal(0.0, treated.noise_sd) : 0.0);
    s.y0 = mean_outcome(control, h, rep.r) +
           (control.noise_sd > 0 ? rn0.normal(0.0, control.noise_sd) : 0.0);
    s.i = ind[i];
    s.y = s.i == 1 ? s.y1 : s.y0;
  }
  return g;
}

inline GeneratedTask gen_task(const GroundTruthRep& rep,
                              const GroundTruthPropensity& prop, int n,
                              Rng rng,
                              TaskFunctionKind kind = TaskFunctionKind::Logistic,
                              double noise_sd = 0.1) {
  Rng rf1 = rng.derive("fn/1");
  Rng rf0 = rng.derive("fn/0");
  TaskFunctionParams treated = draw_task_function(rep.r, rf1, kind, noise_sd);
  TaskFunctionParams control = draw_task_function(rep.r, rf0, kind, noise_sd);
  return gen_task_with(rep, prop, std::move(treated), std::move(control), n, rng);
}

enum class FillMode { Zero, FeatureMean };

// Embeds every task into the d_max catalogue space. Observed coordinates are
// copied bit-exactly; missing slots carry the fill value and a 0 mask entry.
inline TaskSet pad_taskset(const std::vector<Task>& tasks, const Task& target,
                           int d_max, FillMode fill) {
  auto ids_of = [&](const Task& t) {
    std::vector<int> ids = t.feature_ids;
    if (ids.empty()) {
      ids.resize(t.d_k);
      for (int j = 0; j < t.d_k; ++j) ids[j] = j;
    }
    if (int(ids.size()) != t.d_k)
      throw std::invalid_argument("pad_taskset: feature id count != d_k");
    for (int c : ids)
      if (c < 0 || c >= d_max)
        throw std::invalid_argument("pad_taskset: feature id outside catalogue");
    return ids;
  };

  std::vector<double> mean(d_max, 0.0);
  if (fill == FillMode::FeatureMean) {
    std::vector<double> sum(d_max, 0.0);
    std::vector<long> cnt(d_max, 0);
    auto absorb = [&](const Task& t) {
      std::vector<int> ids = ids_of(t);
      for (const Sample& s : t.samples)
        for (int j = 0; j < t.d_k; ++j) {
          sum[ids[j]] += s.x[j];
          ++cnt[ids[j]];
        }
    };
    for (const Task& t : tasks) absorb(t);
    absorb(target);
    for (int c = 0; c < d_max; ++c)
      if (cnt[c] > 0) mean[c] = sum[c] / double(cnt[c]);
  }

  auto pad_one = [&](const Task& t) {
    std::vector<int> ids = ids_of(t);
    Task out;
    out.id = t.id;
    out.d_k = d_max;
    out.samples.reserve(t.samples.size());
    std::vector<double> msk(d_max, 0.0);
    std::vector<double> base(d_max);
    for (int c = 0; c < d_max; ++c)
      base[c] = fill == FillMode::Zero ? 0.0 : mean[c];
    for (int j = 0; j < t.d_k; ++j) msk[ids[j]] = 1.0;
    for (const Sample& s : t.samples) {
      Sample p = s;
      p.x = base;
      for (int j = 0; j < t.d_k; ++j) p.x[ids[j]] = s.x[j];
      p.mask = msk;
      out.samples.push_back(std::move(p));
    }
    return out;
  };

  TaskSet set;
  set.d_max = d_max;
  for (const Task& t : tasks) set.tasks.push_back(pad_one(t));
  set.target = pad_one(target);
  return set;
}

// Pointwise true conditional effect of a generated task.
struct CateOracle {
  GroundTruthRep rep;
  TaskFunctionParams treated;
  TaskFunctionParams control;

  double operator()(const std::vector<double>& x) const {
    std::vector<double> h = rep.eval(x);
    return mean_outcome(treated, h.data(), rep.r) -
           mean_outcome(control, h.data(), rep.r);
  }

  std::vector<double> batch(const Matrix& X) const {
    Matrix H = rep.eval_batch(X);
    std::vector<double> out(X.rows);
    for (int i = 0; i < X.rows; ++i)
      out[i] = mean_outcome(treated, H.row(i), rep.r) -
               mean_outcome(control, H.row(i), rep.r);
    return out;
  }
};

struct OracleEffects {
  double ate_sample = 0.0;      // mean of stored y1 - y0
  double ate_population = 0.0;  // Monte Carlo over fresh covariate draws
  double v_optimal = 0.0;       // semiparametric variance lower bound
  CateOracle cate;
};

inline OracleEffects oracle_effects(const Task& task, const TaskTruth& truth,
                                    const GroundTruthRep& rep, Rng rng,
                                    int mc_draws = 100000) {
  OracleEffects out;
  out.cate = {rep, truth.treated, truth.control};

  double acc = 0.0;
  for (const Sample& s : task.samples) {
    if (!s.has_potential_outcomes())
      throw std::invalid_argument("oracle_effects: potential outcomes missing");
    acc += s.y1 - s.y0;
  }
  out.ate_sample = acc / double(task.n());

  // population pieces in two passes over one fresh covariate batch
  const int block = 1000;
  const int blocks = (mc_draws + block - 1) / block;
  std::vector<double> taus;
  std::vector<double> ps;
  taus.reserve(std::size_t(blocks) * block);
  ps.reserve(std::size_t(blocks) * block);
  Rng rx = rng.derive("voptimal/x");
  for (int bl = 0; bl < blocks; ++bl) {
    Matrix X(block, rep.d);
    for (auto& v : X.a) v = rx.uniform(-1.0, 1.0);
    std::vector<double> tb = out.cate.batch(X);
    std::vector<double> pb = truth.prop.eval_batch(X);
    taus.insert(taus.end(), tb.begin(), tb.end());
    ps.insert(ps.end(), pb.begin(), pb.end());
  }
  double tau_sum = 0.0;
  for (double t : taus) tau_sum += t;
  out.ate_population = tau_sum / double(taus.size());

  const double var1 = truth.treated.noise_sd * truth.treated.noise_sd;
  const double var0 = truth.control.noise_sd * truth.control.noise_sd;
  double v = 0.0;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const double dev = taus[i] - out.ate_population;
    v += var1 / ps[i] + var0 / (1.0 - ps[i]) + dev * dev;
  }
  out.v_optimal = v / double(taus.size());
  return out;
}

}  // namespace covrep
