#pragma once
// Treatment-effect estimation on top of a learned covariate representation:
// arm-wise conditional-mean heads for CATE, and a cross-fitted doubly-robust
// ATE estimator with either an empirical or a model-based propensity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "covrep/data.hpp"
#include "covrep/datagen.hpp"
#include "covrep/matrix.hpp"
#include "covrep/metalearn.hpp"
#include "covrep/rng.hpp"

namespace covrep {

// ---------------------------------------------------------------------------
// Head fitting on a fixed feature matrix
// ---------------------------------------------------------------------------

struct CateFitConfig {
  int gd_steps = 2000;    // full-batch gradient descent budget (TanhMlp heads)
  double gd_rate = 0.01;  // step size on the mean squared residual
  double gd_tol = 1e-10;  // stop when one step improves the loss by less
};

enum class FitMode { FromMeta, FromScratch };

// Exact least squares of y on the feature columns plus an intercept, returned
// as a single-layer head.  Falls back to a tiny scale-aware ridge when the
// normal equations are singular (more parameters than points).
inline MlpParams fit_head_ls(const Matrix& h, const std::vector<double>& y) {
  const int n = h.rows, s = h.cols;
  if (static_cast<int>(y.size()) != n)
    throw std::invalid_argument("fit_head_ls: outcome length mismatch");
  if (n < 1) throw std::invalid_argument("fit_head_ls: empty fitting set");
  const int p = s + 1;
  Matrix g(p, p);
  std::vector<double> rhs(static_cast<std::size_t>(p), 0.0);
  std::vector<double> f(static_cast<std::size_t>(p));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < s; ++j) f[static_cast<std::size_t>(j)] = h(i, j);
    f[static_cast<std::size_t>(s)] = 1.0;
    for (int a = 0; a < p; ++a) {
      rhs[static_cast<std::size_t>(a)] += f[static_cast<std::size_t>(a)] * y[static_cast<std::size_t>(i)];
      for (int b = 0; b < p; ++b) g(a, b) += f[static_cast<std::size_t>(a)] * f[static_cast<std::size_t>(b)];
    }
  }
  auto chol = cholesky(g);
  if (!chol) {
    double tr = 0.0;
    for (int a = 0; a < p; ++a) tr += g(a, a);
    if (!(tr > 0.0)) throw std::runtime_error("fit_head_ls: degenerate features");
    const double lambda = 1e-8 * tr / p;
    for (int a = 0; a < p; ++a) g(a, a) += lambda;
    chol = cholesky(g);
    if (!chol) throw std::runtime_error("fit_head_ls: normal equations not solvable");
  }
  std::vector<double> beta = chol_solve(*chol, rhs);

  MlpParams head;
  head.layer_dims = {s, 1};
  head.hidden_act = Act::Tanh;
  head.output_act = Act::Identity;
  Matrix w(1, s);
  for (int j = 0; j < s; ++j) w(0, j) = beta[static_cast<std::size_t>(j)];
  head.weights.push_back(std::move(w));
  head.biases.push_back({beta[static_cast<std::size_t>(s)]});
  return head;
}

// Full-batch gradient descent on the mean squared residual, from the given
// initialization, with early stopping once a step's improvement drops below
// tolerance.
inline MlpParams fit_head_gd(MlpParams head, const Matrix& h,
                             const std::vector<double>& y, const CateFitConfig& cfg) {
  const int n = h.rows;
  if (static_cast<int>(y.size()) != n)
    throw std::invalid_argument("fit_head_gd: outcome length mismatch");
  if (n < 1) throw std::invalid_argument("fit_head_gd: empty fitting set");
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < cfg.gd_steps; ++step) {
    ForwardTrace trace = forward_trace(head, h);
    const Matrix& out = trace.post.back();
    double loss = 0.0;
    Matrix upstream(n, 1);
    for (int i = 0; i < n; ++i) {
      const double r = out(i, 0) - y[static_cast<std::size_t>(i)];
      loss += r * r;
      upstream(i, 0) = 2.0 * r / n;
    }
    loss /= n;
    if (!std::isfinite(loss)) throw std::runtime_error("fit_head_gd: loss diverged");
    if (prev - loss < cfg.gd_tol) break;
    prev = loss;
    BackpropResult bp = backward_batch(head, trace, upstream);
    sgd_step_inplace(head, bp.grads, cfg.gd_rate);
  }
  return head;
}

namespace detail {

inline MlpParams scratch_head(int s, HeadClass hc, const std::vector<int>& hidden,
                              Rng& rng) {
  std::vector<int> dims;
  dims.push_back(s);
  if (hc == HeadClass::TanhMlp)
    for (int w : hidden) dims.push_back(w);
  dims.push_back(1);
  return glorot_init(dims, Act::Tanh, Act::Identity, rng);
}

// Fits one head on (h, y): closed-form least squares for Linear heads (the
// exact argmin, so the fit mode is irrelevant), gradient descent from the
// chosen initialization for TanhMlp heads.
inline MlpParams fit_head(const Matrix& h, const std::vector<double>& y, HeadClass hc,
                          FitMode mode, const MlpParams* meta_head,
                          const std::vector<int>& scratch_hidden, Rng rng,
                          const CateFitConfig& cfg) {
  if (hc == HeadClass::Linear) return fit_head_ls(h, y);
  MlpParams init;
  if (mode == FitMode::FromMeta) {
    if (meta_head == nullptr)
      throw std::invalid_argument("fit_head: FromMeta needs a meta head");
    init = *meta_head;
  } else {
    init = scratch_head(h.cols, hc, scratch_hidden, rng);
  }
  return fit_head_gd(std::move(init), h, y, cfg);
}

inline double model_predict(const MetaModel& m, const std::vector<double>& x) {
  return forward(m.head, forward(m.encoder, x))[0];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CATE: arm-wise conditional-mean heads on shared features
// ---------------------------------------------------------------------------

struct CateModel {
  std::optional<MlpParams> encoder;  // absent: heads act on the raw covariates
  MlpParams head1;
  MlpParams head0;
  HeadClass head_class = HeadClass::TanhMlp;
};

inline std::vector<double> cate_predict_batch(const CateModel& m, const Matrix& x) {
  Matrix feats = m.encoder ? forward_batch(*m.encoder, x) : x;
  Matrix p1 = forward_batch(m.head1, feats);
  Matrix p0 = forward_batch(m.head0, feats);
  std::vector<double> out(static_cast<std::size_t>(x.rows));
  for (int i = 0; i < x.rows; ++i) out[static_cast<std::size_t>(i)] = p1(i, 0) - p0(i, 0);
  return out;
}

inline double cate_predict(const CateModel& m, const std::vector<double>& x) {
  Matrix one(1, static_cast<int>(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) one(0, static_cast<int>(j)) = x[j];
  return cate_predict_batch(m, one)[0];
}

namespace detail {

// Per-arm covariates and outcomes of a task.
inline void split_arm(const Task& task, int arm, Matrix* x, std::vector<double>* y) {
  int cnt = 0;
  for (const Sample& s : task.samples) cnt += (s.i == arm) ? 1 : 0;
  const int d = task.samples.empty() ? 0 : static_cast<int>(task.samples.front().x.size());
  *x = Matrix(cnt, d);
  y->assign(static_cast<std::size_t>(cnt), 0.0);
  int row = 0;
  for (const Sample& s : task.samples) {
    if (s.i != arm) continue;
    for (int j = 0; j < d; ++j) (*x)(row, j) = s.x[static_cast<std::size_t>(j)];
    (*y)[static_cast<std::size_t>(row)] = s.y;
    ++row;
  }
}

}  // namespace detail

// Fits one conditional-mean head per arm on the encoder features of the
// target task.  FromMeta starts each head at the meta head; FromScratch
// starts from a fresh initialization of the same architecture.
inline CateModel fit_cate(const Task& target, const MetaModel& meta, HeadClass hc,
                          FitMode mode, Rng& rng, const CateFitConfig& cfg = {}) {
  Matrix x1, x0;
  std::vector<double> y1, y0;
  detail::split_arm(target, 1, &x1, &y1);
  detail::split_arm(target, 0, &x0, &y0);
  if (x1.rows == 0 || x0.rows == 0)
    throw std::invalid_argument("fit_cate: target task must have both arms");

  std::vector<int> hidden(meta.head.layer_dims.begin() + 1, meta.head.layer_dims.end() - 1);
  CateModel m;
  m.encoder = meta.encoder;
  m.head_class = hc;
  Matrix h1 = forward_batch(meta.encoder, x1);
  Matrix h0 = forward_batch(meta.encoder, x0);
  m.head1 = detail::fit_head(h1, y1, hc, mode, &meta.head, hidden, rng.derive("head/1"), cfg);
  m.head0 = detail::fit_head(h0, y0, hc, mode, &meta.head, hidden, rng.derive("head/0"), cfg);
  return m;
}

// Baseline comparator: the same head architectures fit directly on the raw
// covariates, always from scratch.
inline CateModel fit_cate_raw(const Task& target, HeadClass hc,
                              const std::vector<int>& head_hidden, Rng& rng,
                              const CateFitConfig& cfg = {}) {
  Matrix x1, x0;
  std::vector<double> y1, y0;
  detail::split_arm(target, 1, &x1, &y1);
  detail::split_arm(target, 0, &x0, &y0);
  if (x1.rows == 0 || x0.rows == 0)
    throw std::invalid_argument("fit_cate_raw: target task must have both arms");
  CateModel m;
  m.head_class = hc;
  m.head1 = detail::fit_head(x1, y1, hc, FitMode::FromScratch, nullptr, head_hidden,
                             rng.derive("head/1"), cfg);
  m.head0 = detail::fit_head(x0, y0, hc, FitMode::FromScratch, nullptr, head_hidden,
                             rng.derive("head/0"), cfg);
  return m;
}

// Mean squared error of the fitted CATE against the generating truth over
// n_eval fresh covariate draws.
inline double cate_mse(const CateModel& m, const CateOracle& oracle, int n_eval, Rng rng) {
  if (n_eval < 1) throw std::invalid_argument("cate_mse: need n_eval >= 1");
  const int d = oracle.rep.d;
  Matrix x(n_eval, d);
  for (double& v : x.a) v = rng.uniform(-1.0, 1.0);
  std::vector<double> pred = cate_predict_batch(m, x);
  std::vector<double> truth = oracle.batch(x);
  double mse = 0.0;
  for (int i = 0; i < n_eval; ++i) {
    const double e = pred[static_cast<std::size_t>(i)] - truth[static_cast<std::size_t>(i)];
    mse += e * e;
  }
  return mse / n_eval;
}

// ---------------------------------------------------------------------------
// Cross-fitting plan
// ---------------------------------------------------------------------------

struct CrossFitConfig {
  int folds = 5;
};

// A fold id per sample per arm: the arm-l outcome model that predicts at
// sample j is fit on the arm-l samples whose arm-l fold differs from j's.
struct CrossFitPlan {
  int folds = 0;
  std::vector<int> arm1_fold;
  std::vector<int> arm0_fold;
};

inline CrossFitPlan make_crossfit_plan(int n, int folds, Rng rng) {
  if (folds < 2) throw std::invalid_argument("crossfit: need at least 2 folds");
  if (n < folds) throw std::invalid_argument("crossfit: fewer samples than folds");
  CrossFitPlan plan;
  plan.folds = folds;
  for (int arm : {1, 0}) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng r = rng.derive(arm == 1 ? "arm1" : "arm0");
    r.shuffle(idx);
    std::vector<int>& fold = arm == 1 ? plan.arm1_fold : plan.arm0_fold;
    fold.assign(static_cast<std::size_t>(n), 0);
    for (int pos = 0; pos < n; ++pos)
      fold[static_cast<std::size_t>(idx[static_cast<std::size_t>(pos)])] = pos % folds;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Doubly-robust ATE
// ---------------------------------------------------------------------------

enum class PropensityMode { Empirical, LearnedPropensity };

struct AteReport {
  double tau_hat = 0.0;
  double p_hat = 0.0;                 // mean propensity used
  std::vector<double> influence;      // per-unit terms; tau_hat is their mean
  std::vector<double> yhat1;          // cross-fitted outcome predictions, arm 1
  std::vector<double> yhat0;          // cross-fitted outcome predictions, arm 0
  std::vector<double> phat_per_unit;  // per-unit propensity
  int n0 = 0;
};

// The estimator's algebra, separated from model fitting: given per-unit
// outcome predictions and propensities, each unit contributes
//   I (y - yhat1)/p - (1 - I)(y - yhat0)/(1 - p) + yhat1 - yhat0,
// and the estimate is the mean contribution.
inline AteReport dr_ate_core(const std::vector<int>& treat, const std::vector<double>& y,
                             const std::vector<double>& yhat1,
                             const std::vector<double>& yhat0,
                             const std::vector<double>& phat) {
  const std::size_t n = treat.size();
  if (n == 0) throw std::invalid_argument("dr_ate_core: empty sample");
  if (y.size() != n || yhat1.size() != n || yhat0.size() != n || phat.size() != n)
    throw std::invalid_argument("dr_ate_core: length mismatch");
  AteReport rep;
  rep.n0 = static_cast<int>(n);
  rep.influence.resize(n);
  rep.yhat1 = yhat1;
  rep.yhat0 = yhat0;
  rep.phat_per_unit = phat;
  double sum = 0.0, psum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = phat[i];
    if (!(p > 0.0) || !(p < 1.0))
      throw std::invalid_argument("dr_ate_core: propensity must lie strictly in (0,1)");
    const double ind = treat[i] == 1 ? 1.0 : 0.0;
    const double term = ind * (y[i] - yhat1[i]) / p -
                        (1.0 - ind) * (y[i] - yhat0[i]) / (1.0 - p) +
                        yhat1[i] - yhat0[i];
    rep.influence[i] = term;
    sum += term;
    psum += p;
  }
  rep.tau_hat = sum / static_cast<double>(n);
  rep.p_hat = psum / static_cast<double>(n);
  return rep;
}

namespace detail {

// Cross-fitted outcome predictions for both arms at every sample: the arm-l
// head predicting at fold i is fit on arm-l samples outside fold i, so no
// sample's outcome ever influences its own prediction.
inline void crossfit_outcomes(const Matrix& feats, const std::vector<int>& treat,
                              const std::vector<double>& y, const CrossFitPlan& plan,
                              HeadClass hc, FitMode mode, const MlpParams* meta_head,
                              const std::vector<int>& scratch_hidden, Rng& rng,
                              const CateFitConfig& cfg, std::vector<double>* yhat1,
                              std::vector<double>* yhat0) {
  const int n = feats.rows, s = feats.cols;
  yhat1->assign(static_cast<std::size_t>(n), 0.0);
  yhat0->assign(static_cast<std::size_t>(n), 0.0);
  for (int arm : {1, 0}) {
    const std::vector<int>& fold = arm == 1 ? plan.arm1_fold : plan.arm0_fold;
    std::vector<double>& yhat = arm == 1 ? *yhat1 : *yhat0;
    for (int i = 0; i < plan.folds; ++i) {
      // Training set: this arm's samples outside fold i.
      std::vector<int> rows;
      for (int j = 0; j < n; ++j)
        if (treat[static_cast<std::size_t>(j)] == arm && fold[static_cast<std::size_t>(j)] != i)
          rows.push_back(j);
      if (static_cast<int>(rows.size()) < 2)
        throw std::runtime_error("dr_ate: a cross-fitting fold leaves too few points to fit");
      Matrix htrain(static_cast<int>(rows.size()), s);
      std::vector<double> ytrain(rows.size());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const int j = rows[k];
        for (int c = 0; c < s; ++c) htrain(static_cast<int>(k), c) = feats(j, c);
        ytrain[k] = y[static_cast<std::size_t>(j)];
      }
      MlpParams head = fit_head(htrain, ytrain, hc, mode, meta_head, scratch_hidden,
                                rng.derive("head/" + std::to_string(arm) + "/" + std::to_string(i)),
                                cfg);
      // Predict every sample whose arm-`arm` fold is i.
      std::vector<int> prows;
      for (int j = 0; j < n; ++j)
        if (fold[static_cast<std::size_t>(j)] == i) prows.push_back(j);
      Matrix hpred(static_cast<int>(prows.size()), s);
      for (std::size_t k = 0; k < prows.size(); ++k)
        for (int c = 0; c < s; ++c) hpred(static_cast<int>(k), c) = feats(prows[k], c);
      Matrix pred = forward_batch(head, hpred);
      for (std::size_t k = 0; k < prows.size(); ++k)
        yhat[static_cast<std::size_t>(prows[k])] = pred(static_cast<int>(k), 0);
    }
  }
}

inline AteReport dr_ate_impl(const Matrix& feats, const Task& task, HeadClass hc,
                             FitMode mode, const MlpParams* meta_head,
                             const std::vector<int>& scratch_hidden, PropensityMode pm,
                             const MetaModel* prop, const CrossFitConfig& cf, Rng& rng,
                             const CateFitConfig& cfg) {
  const int n = task.n();
  std::vector<int> treat(static_cast<std::size_t>(n));
  std::vector<double> y(static_cast<std::size_t>(n));
  int n1 = 0;
  for (int j = 0; j < n; ++j) {
    treat[static_cast<std::size_t>(j)] = task.samples[static_cast<std::size_t>(j)].i;
    y[static_cast<std::size_t>(j)] = task.samples[static_cast<std::size_t>(j)].y;
    n1 += task.samples[static_cast<std::size_t>(j)].i;
  }
  const int n0ctl = n - n1;
  if (n1 == 0 || n0ctl == 0)
    throw std::invalid_argument("dr_ate: empirical propensity would be 0 or 1");
  if (n1 < 2 * cf.folds || n0ctl < 2 * cf.folds)
    throw std::invalid_argument("dr_ate: need at least 2 samples per fold per arm");

  CrossFitPlan plan = make_crossfit_plan(n, cf.folds, rng.derive("folds"));
  std::vector<double> yhat1, yhat0;
  crossfit_outcomes(feats, treat, y, plan, hc, mode, meta_head, scratch_hidden, rng, cfg,
                    &yhat1, &yhat0);

  std::vector<double> phat(static_cast<std::size_t>(n));
  if (pm == PropensityMode::Empirical) {
    const double p = static_cast<double>(n1) / n;
    std::fill(phat.begin(), phat.end(), p);
  } else {
    if (prop == nullptr)
      throw std::invalid_argument("dr_ate: LearnedPropensity mode needs a propensity model");
    for (int j = 0; j < n; ++j) {
      double p = model_predict(*prop, task.samples[static_cast<std::size_t>(j)].x);
      p = std::clamp(p, 0.02, 0.98);
      phat[static_cast<std::size_t>(j)] = p;
    }
  }
  return dr_ate_core(treat, y, yhat1, yhat0, phat);
}

}  // namespace detail

// Doubly-robust ATE on the learned representation: cross-fitted arm-wise
// outcome heads on the encoder features, with the chosen propensity.
inline AteReport dr_ate(const Task& target, const MetaModel& meta, HeadClass hc,
                        FitMode mode, PropensityMode pm, const MetaModel* prop,
                        const CrossFitConfig& cf, Rng& rng, const CateFitConfig& cfg = {}) {
  Matrix x = covariate_matrix(target);
  Matrix feats = forward_batch(meta.encoder, x);
  std::vector<int> hidden(meta.head.layer_dims.begin() + 1, meta.head.layer_dims.end() - 1);
  return detail::dr_ate_impl(feats, target, hc, mode, &meta.head, hidden, pm, prop, cf,
                             rng, cfg);
}

// Baseline comparator: the same estimator with outcome heads fit directly on
// the raw covariates, from scratch.
inline AteReport dr_ate_raw(const Task& target, HeadClass hc,
                            const std::vector<int>& head_hidden, PropensityMode pm,
                            const MetaModel* prop, const CrossFitConfig& cf, Rng& rng,
                            const CateFitConfig& cfg = {}) {
  Matrix x = covariate_matrix(target);
  return detail::dr_ate_impl(x, target, hc, FitMode::FromScratch, nullptr, head_hidden,
                             pm, prop, cf, rng, cfg);
}

// ---------------------------------------------------------------------------
// Aggregation across repeats
// ---------------------------------------------------------------------------

struct MseSummary {
  double mse = 0.0;
  double ci95_halfwidth = 0.0;  // normal approximation over repeats
};

inline MseSummary aggregate_mse(const std::vector<double>& estimates,
                                const std::vector<double>& truths) {
  const std::size_t r = estimates.size();
  if (r == 0 || truths.size() != r)
    throw std::invalid_argument("aggregate_mse: need matching nonempty vectors");
  std::vector<double> sq(r);
  double mean = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double e = estimates[i] - truths[i];
    sq[i] = e * e;
    mean += sq[i];
  }
  mean /= static_cast<double>(r);
  double var = 0.0;
  for (double v : sq) {
    const double d = v - mean;
    var += d * d;
  }
  var = r > 1 ? var / static_cast<double>(r - 1) : 0.0;
  MseSummary s;
  s.mse = mean;
  s.ci95_halfwidth = 1.96 * std::sqrt(var / static_cast<double>(r));
  return s;
}

}  // namespace covrep
