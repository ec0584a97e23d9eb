#pragma once
// Rerandomized experimental design: Mahalanobis balance checking on a chosen
// covariate set, acceptance thresholds (closed-form chi-squared or Monte
// Carlo calibrated), rejection sampling of balanced assignments, and Monte
// Carlo variance-ratio experiments comparing designs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "covrep/chi2.hpp"
#include "covrep/data.hpp"
#include "covrep/matrix.hpp"
#include "covrep/metalearn.hpp"
#include "covrep/rng.hpp"

namespace covrep {

// ---------------------------------------------------------------------------
// Assignments
// ---------------------------------------------------------------------------

struct Assignment {
  std::vector<int> indicator;  // 1 = treated, 0 = control
  int m1 = 0;                  // treated count
  int m0 = 0;                  // control count

  int m() const { return m1 + m0; }
  double r1() const { return static_cast<double>(m1) / m(); }
  double r0() const { return static_cast<double>(m0) / m(); }
};

// Builds an Assignment from an indicator vector, checking the group-size
// bookkeeping.
inline Assignment make_assignment(const std::vector<int>& indicator) {
  Assignment a;
  a.indicator = indicator;
  for (int v : indicator) {
    if (v != 0 && v != 1) throw std::invalid_argument("make_assignment: indicator entries must be 0 or 1");
    if (v == 1) ++a.m1; else ++a.m0;
  }
  return a;
}

// Uniform draw over assignments with exactly m1 treated units, by shuffling a
// fixed indicator multiset (guarantees exact group sizes).
inline Assignment complete_randomization(int m, int m1, Rng& rng) {
  if (m < 2 || m1 < 1 || m1 > m - 1)
    throw std::invalid_argument("complete_randomization: need 1 <= m1 <= m-1, m >= 2");
  std::vector<int> ind(static_cast<std::size_t>(m), 0);
  std::fill(ind.begin(), ind.begin() + m1, 1);
  rng.shuffle(ind);
  Assignment a;
  a.indicator = std::move(ind);
  a.m1 = m1;
  a.m0 = m - m1;
  return a;
}

// ---------------------------------------------------------------------------
// Mahalanobis balance statistic
// ---------------------------------------------------------------------------

struct BalanceStat {
  double M = 0.0;                 // Mahalanobis distance between group means
  std::vector<double> tau_x;      // treated mean - control mean, per covariate
  double threshold = std::numeric_limits<double>::infinity();
  bool accepted = true;           // accepted <=> M <= threshold
};

// Precomputed quantities for evaluating M over many assignments of the same
// covariate matrix and group sizes: the centered-covariance inverse and the
// per-column sums needed to turn treated-group sums into mean differences.
struct MahalanobisContext {
  Matrix z;                      // m x q covariates
  int m = 0, q = 0, m1 = 0, m0 = 0;
  std::vector<double> colsum;    // column sums of z
  Matrix vinv;                   // inverse of S^2 / (r1 r0), q x q
};

inline MahalanobisContext make_mahalanobis_context(const Matrix& Z, int m1) {
  const int m = Z.rows, q = Z.cols;
  const int m0 = m - m1;
  if (m1 < 2 || m0 < 2)
    throw std::invalid_argument("mahalanobis: need at least 2 units per group");
  if (q < 1) throw std::invalid_argument("mahalanobis: need at least one covariate");

  MahalanobisContext ctx;
  ctx.z = Z;
  ctx.m = m;
  ctx.q = q;
  ctx.m1 = m1;
  ctx.m0 = m0;
  ctx.colsum.assign(static_cast<std::size_t>(q), 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < q; ++j) ctx.colsum[static_cast<std::size_t>(j)] += Z(i, j);

  // Sample covariance S^2 (denominator m - 1) of the rows of Z.
  Matrix zc = Z;
  for (int j = 0; j < q; ++j) {
    const double mean = ctx.colsum[static_cast<std::size_t>(j)] / m;
    for (int i = 0; i < m; ++i) zc(i, j) -= mean;
  }
  Matrix s(q, q);
  matmul_tn_acc(zc, zc, s);
  for (double& v : s.a) v /= (m - 1);

  const double r1 = static_cast<double>(m1) / m;
  const double r0 = static_cast<double>(m0) / m;
  Matrix v = s;
  for (double& e : v.a) e /= (r1 * r0);

  auto chol = cholesky(v);
  if (!chol) {
    // Singular covariance (e.g. q >= m): ridge-regularize S^2 before
    // inversion, with lambda proportional to its average diagonal scale.
    double tr = 0.0;
    for (int j = 0; j < q; ++j) tr += s(j, j);
    if (!(tr > 0.0))
      throw std::runtime_error("mahalanobis: covariate matrix has zero variance");
    const double lambda = 1e-8 * tr / q;
    for (int j = 0; j < q; ++j) v(j, j) += lambda / (r1 * r0);
    chol = cholesky(v);
    if (!chol)
      throw std::runtime_error("mahalanobis: covariance not invertible even after ridge");
  }
  ctx.vinv = chol_inverse(*chol);
  return ctx;
}

// M = (sqrt(m) tau_x)' Vinv (sqrt(m) tau_x) for one assignment, using the
// precomputed context.  tau_x needs only the treated-group column sums t:
// tau = t (1/m1 + 1/m0) - colsum / m0.
inline BalanceStat mahalanobis_with(const MahalanobisContext& ctx, const Assignment& asg) {
  if (asg.m() != ctx.m || asg.m1 != ctx.m1)
    throw std::invalid_argument("mahalanobis_with: assignment does not match context");
  const int q = ctx.q;
  std::vector<double> t(static_cast<std::size_t>(q), 0.0);
  for (int i = 0; i < ctx.m; ++i)
    if (asg.indicator[static_cast<std::size_t>(i)] == 1)
      for (int j = 0; j < q; ++j) t[static_cast<std::size_t>(j)] += ctx.z(i, j);

  BalanceStat st;
  st.tau_x.resize(static_cast<std::size_t>(q));
  const double c1 = 1.0 / ctx.m1 + 1.0 / ctx.m0;
  for (int j = 0; j < q; ++j)
    st.tau_x[static_cast<std::size_t>(j)] =
        t[static_cast<std::size_t>(j)] * c1 - ctx.colsum[static_cast<std::size_t>(j)] / ctx.m0;

  double quad = 0.0;
  for (int a = 0; a < q; ++a) {
    double row = 0.0;
    for (int b = 0; b < q; ++b) row += ctx.vinv(a, b) * st.tau_x[static_cast<std::size_t>(b)];
    quad += st.tau_x[static_cast<std::size_t>(a)] * row;
  }
  st.M = ctx.m * quad;
  return st;
}

inline BalanceStat mahalanobis(const Matrix& Z, const Assignment& asg) {
  return mahalanobis_with(make_mahalanobis_context(Z, asg.m1), asg);
}

// ---------------------------------------------------------------------------
// Blocked Monte Carlo machinery (the single-core hot path)
// ---------------------------------------------------------------------------

// Fills the columns of W (m x B) with independent complete randomizations of
// m1 treated among m.
inline void fill_assignment_block(Matrix& w, int m1, Rng& rng,
                                  std::vector<int>& scratch) {
  const int m = w.rows, nb = w.cols;
  scratch.assign(static_cast<std::size_t>(m), 0);
  std::fill(scratch.begin(), scratch.begin() + m1, 1);
  for (int j = 0; j < nb; ++j) {
    rng.shuffle(scratch);
    for (int i = 0; i < m; ++i) w(i, j) = scratch[static_cast<std::size_t>(i)];
  }
}

// Mahalanobis distances for a block of assignments given as indicator columns
// of W: treated sums T = Z'W in one matrix product, then a q x B solve-free
// quadratic form per column.
inline std::vector<double> mahalanobis_block(const MahalanobisContext& ctx, const Matrix& w) {
  const int q = ctx.q, nb = w.cols;
  Matrix t = matmul_tn(ctx.z, w);  // q x B treated-group column sums
  const double c1 = 1.0 / ctx.m1 + 1.0 / ctx.m0;
  for (int a = 0; a < q; ++a)
    for (int j = 0; j < nb; ++j)
      t(a, j) = t(a, j) * c1 - ctx.colsum[static_cast<std::size_t>(a)] / ctx.m0;
  Matrix u = matmul(ctx.vinv, t);  // q x B
  std::vector<double> out(static_cast<std::size_t>(nb));
  for (int j = 0; j < nb; ++j) {
    double quad = 0.0;
    for (int a = 0; a < q; ++a) quad += t(a, j) * u(a, j);
    out[static_cast<std::size_t>(j)] = ctx.m * quad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Acceptance thresholds
// ---------------------------------------------------------------------------

enum class ThresholdMode { ChiSquare, MonteCarlo };

namespace detail {

// Empirical p_a-quantile of M over n_mc complete randomizations.
inline double monte_carlo_threshold(const MahalanobisContext& ctx, double p_a,
                                    Rng& rng, int n_mc) {
  if (n_mc < 100) throw std::invalid_argument("threshold: need n_mc >= 100");
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(n_mc));
  const int block = 64;
  std::vector<int> scratch;
  Matrix w(ctx.m, block);
  int left = n_mc;
  while (left > 0) {
    const int nb = std::min(block, left);
    if (nb != w.cols) w = Matrix(ctx.m, nb);
    fill_assignment_block(w, ctx.m1, rng, scratch);
    auto mv = mahalanobis_block(ctx, w);
    ms.insert(ms.end(), mv.begin(), mv.end());
    left -= nb;
  }
  const int k = std::max(1, static_cast<int>(std::floor(p_a * n_mc)));
  std::nth_element(ms.begin(), ms.begin() + (k - 1), ms.end());
  return ms[static_cast<std::size_t>(k - 1)];
}

}  // namespace detail

inline double threshold_with(const MahalanobisContext& ctx, double p_a,
                             ThresholdMode mode, Rng* rng = nullptr, int n_mc = 1000) {
  if (!(p_a > 0.0) || p_a > 1.0)
    throw std::invalid_argument("threshold: need 0 < p_a <= 1");
  if (p_a == 1.0) return std::numeric_limits<double>::infinity();
  if (mode == ThresholdMode::ChiSquare) return chi2_inv(p_a, ctx.q);
  if (rng == nullptr)
    throw std::invalid_argument("threshold: MonteCarlo mode needs an rng");
  return detail::monte_carlo_threshold(ctx, p_a, *rng, n_mc);
}

inline double threshold(const Matrix& Z, int m1, double p_a,
                        ThresholdMode mode = ThresholdMode::ChiSquare,
                        Rng* rng = nullptr, int n_mc = 1000) {
  return threshold_with(make_mahalanobis_context(Z, m1), p_a, mode, rng, n_mc);
}

// ---------------------------------------------------------------------------
// Rerandomized sampling
// ---------------------------------------------------------------------------

// Draws complete randomizations until the balance statistic falls at or below
// the acceptance threshold; returns the accepted assignment and its statistic.
inline std::pair<Assignment, BalanceStat> rem_sample_with(
    const MahalanobisContext& ctx, double a, Rng& rng,
    std::int64_t max_draws = 1000000) {
  for (std::int64_t draw = 0; draw < max_draws; ++draw) {
    Assignment asg = complete_randomization(ctx.m, ctx.m1, rng);
    BalanceStat st = mahalanobis_with(ctx, asg);
    if (st.M <= a) {
      st.threshold = a;
      st.accepted = true;
      return {std::move(asg), std::move(st)};
    }
  }
  throw std::runtime_error("rem_sample: no acceptance within " + std::to_string(max_draws) +
                           " draws (threshold too tight)");
}

inline std::pair<Assignment, BalanceStat> rem_sample(
    const Matrix& Z, int m1, double p_a, Rng& rng,
    ThresholdMode mode = ThresholdMode::ChiSquare, int n_mc = 1000) {
  MahalanobisContext ctx = make_mahalanobis_context(Z, m1);
  Rng trng = rng.derive("threshold");
  const double a = threshold_with(ctx, p_a, mode, &trng, n_mc);
  Rng drng = rng.derive("draws");
  return rem_sample_with(ctx, a, drng);
}

// ---------------------------------------------------------------------------
// Difference in means
// ---------------------------------------------------------------------------

inline double diff_in_means(const Assignment& asg, const std::vector<double>& y) {
  if (y.size() != asg.indicator.size())
    throw std::invalid_argument("diff_in_means: outcome length mismatch");
  if (asg.m1 < 1 || asg.m0 < 1)
    throw std::invalid_argument("diff_in_means: both groups must be nonempty");
  double st = 0.0, sc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    (asg.indicator[i] == 1 ? st : sc) += y[i];
  return st / asg.m1 - sc / asg.m0;
}

// ---------------------------------------------------------------------------
// Variance-ratio experiment
// ---------------------------------------------------------------------------

enum class CovariatesMode { Raw, Representation };

struct DesignExperimentReport {
  double var_rem = 0.0;     // Monte Carlo Var(tau-hat) under rerandomization
  double var_cr = 0.0;      // Monte Carlo Var(tau-hat) under complete randomization
  double ratio = 0.0;       // var_rem / var_cr
  int replications = 0;
  double accept_rate = 0.0; // accepted / drawn in the rerandomized phase
  double threshold = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double sample_variance(const std::vector<double>& v) {
  const std::size_t n = v.size();
  if (n < 2) throw std::invalid_argument("sample_variance: need at least 2 values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : v) {
    const double d = x - mean;
    ss += d * d;
  }
  return ss / static_cast<double>(n - 1);
}

// Difference in observed means for an indicator column: treated units reveal
// y1, control units reveal y0.
inline double tau_hat_column(const Matrix& w, int col, const std::vector<double>& y1,
                             const std::vector<double>& y0, double sum_y0, int m1, int m0) {
  double t1 = 0.0, t0 = 0.0;
  const int m = w.rows;
  for (int i = 0; i < m; ++i) {
    const double wi = w(i, col);
    t1 += wi * y1[static_cast<std::size_t>(i)];
    t0 += wi * y0[static_cast<std::size_t>(i)];
  }
  return t1 / m1 - (sum_y0 - t0) / m0;
}

}  // namespace detail

// Monte Carlo comparison of Var(tau-hat) under rerandomization on the given
// covariates F versus complete randomization, with potential outcomes
// (y1, y0) revealing the observed outcome per assignment.  The rerandomized
// phase drains blocks of complete randomizations and keeps the accepted ones,
// which is distributionally identical to repeated rejection sampling.
inline DesignExperimentReport variance_ratio_on(
    const Matrix& f, const std::vector<double>& y1, const std::vector<double>& y0,
    double p_a, int reps, Rng& rng,
    ThresholdMode tmode = ThresholdMode::ChiSquare, int n_mc = 1000,
    std::int64_t max_total_draws = 50000000) {
  const int m = f.rows;
  if (static_cast<int>(y1.size()) != m || static_cast<int>(y0.size()) != m)
    throw std::invalid_argument("variance_ratio_on: outcome length mismatch");
  if (reps < 100) throw std::invalid_argument("variance_ratio_on: need reps >= 100");
  const int m1 = m / 2, m0 = m - m1;
  MahalanobisContext ctx = make_mahalanobis_context(f, m1);
  Rng trng = rng.derive("threshold");
  const double a = threshold_with(ctx, p_a, tmode, &trng, n_mc);

  double sum_y0 = 0.0;
  for (double v : y0) sum_y0 += v;

  const int block = 64;
  std::vector<int> scratch;
  Matrix w(m, block);

  // Rerandomized phase.
  std::vector<double> taus_rem;
  taus_rem.reserve(static_cast<std::size_t>(reps));
  std::int64_t drawn = 0;
  Rng rrng = rng.derive("rem");
  const bool accept_all = std::isinf(a);
  while (static_cast<int>(taus_rem.size()) < reps) {
    if (drawn >= max_total_draws)
      throw std::runtime_error("variance_ratio_on: draw budget exhausted (threshold too tight)");
    fill_assignment_block(w, m1, rrng, scratch);
    drawn += block;
    if (accept_all) {
      for (int j = 0; j < block && static_cast<int>(taus_rem.size()) < reps; ++j)
        taus_rem.push_back(detail::tau_hat_column(w, j, y1, y0, sum_y0, m1, m0));
      continue;
    }
    auto ms = mahalanobis_block(ctx, w);
    for (int j = 0; j < block && static_cast<int>(taus_rem.size()) < reps; ++j)
      if (ms[static_cast<std::size_t>(j)] <= a)
        taus_rem.push_back(detail::tau_hat_column(w, j, y1, y0, sum_y0, m1, m0));
  }

  // Complete-randomization phase.
  std::vector<double> taus_cr;
  taus_cr.reserve(static_cast<std::size_t>(reps));
  Rng crng = rng.derive("cr");
  while (static_cast<int>(taus_cr.size()) < reps) {
    fill_assignment_block(w, m1, crng, scratch);
    for (int j = 0; j < block && static_cast<int>(taus_cr.size()) < reps; ++j)
      taus_cr.push_back(detail::tau_hat_column(w, j, y1, y0, sum_y0, m1, m0));
  }

  DesignExperimentReport rep;
  rep.var_rem = detail::sample_variance(taus_rem);
  rep.var_cr = detail::sample_variance(taus_cr);
  rep.ratio = rep.var_rem / rep.var_cr;
  rep.replications = reps;
  rep.accept_rate = accept_all ? 1.0 : static_cast<double>(reps) / static_cast<double>(drawn);
  rep.threshold = a;
  return rep;
}

// Extracts the design covariates for a task: the raw covariate matrix, or the
// encoder features of a trained model.
inline Matrix design_covariates(const Task& task, CovariatesMode mode,
                                const MetaModel* model = nullptr) {
  Matrix x = covariate_matrix(task);
  if (mode == CovariatesMode::Raw) return x;
  if (model == nullptr)
    throw std::invalid_argument("design_covariates: Representation mode needs a model");
  return forward_batch(model->encoder, x);
}

inline DesignExperimentReport variance_ratio_experiment(
    const Task& task, CovariatesMode mode, const MetaModel* model, double p_a,
    int reps, Rng& rng, ThresholdMode tmode = ThresholdMode::ChiSquare, int n_mc = 1000) {
  const int m = task.n();
  std::vector<double> y1(static_cast<std::size_t>(m)), y0(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const Sample& s = task.samples[static_cast<std::size_t>(i)];
    if (!s.has_potential_outcomes())
      throw std::invalid_argument("variance_ratio_experiment: task lacks potential outcomes");
    y1[static_cast<std::size_t>(i)] = s.y1;
    y0[static_cast<std::size_t>(i)] = s.y0;
  }
  Matrix f = design_covariates(task, mode, model);
  return variance_ratio_on(f, y1, y0, p_a, reps, rng, tmode, n_mc);
}

// ---------------------------------------------------------------------------
// Closed-form curves
// ---------------------------------------------------------------------------

namespace detail {

// F_{chi2_{q+2}}(F_{chi2_q}^{-1}(p)): the asymptotic factor by which
// rerandomization at acceptance probability p shrinks the balanced-covariate
// variance component in dimension q.
inline double shrink_factor(int q, double p) {
  return chi2_cdf(chi2_inv(p, q), q + 2);
}

}  // namespace detail

// Asymptotic variance ratio of rerandomization on an s-dimensional
// representation versus the full d covariates, at acceptance probability p_a,
// for outcomes fully explained by the representation.  Numerator and
// denominator go through the identical code path, so s == d gives exactly 1.
inline double theoretical_ratio(int d, int s, double p_a) {
  if (s < 1 || d < s) throw std::invalid_argument("theoretical_ratio: need 1 <= s <= d");
  if (!(p_a > 0.0) || !(p_a < 1.0))
    throw std::invalid_argument("theoretical_ratio: need 0 < p_a < 1");
  return detail::shrink_factor(s, p_a) / detail::shrink_factor(d, p_a);
}

// Percent reduction in asymptotic variance from rerandomization at acceptance
// probability p_a when the covariates explain a fraction R2 of the outcome
// variance, per dimension: 100 R2 (1 - v_q), v_q = F_{q+2}(a)/F_q(a) at
// a = chi2_inv(p_a, q).
inline std::vector<std::pair<int, double>> percent_variance_reduction(
    double r2, double p_a, const std::vector<int>& dims) {
  if (!(r2 >= 0.0) || !(r2 <= 1.0))
    throw std::invalid_argument("percent_variance_reduction: need 0 <= R2 <= 1");
  if (!(p_a > 0.0) || !(p_a < 1.0))
    throw std::invalid_argument("percent_variance_reduction: need 0 < p_a < 1");
  std::vector<std::pair<int, double>> curve;
  curve.reserve(dims.size());
  for (int q : dims) {
    if (q < 1) throw std::invalid_argument("percent_variance_reduction: dims must be >= 1");
    const double aq = chi2_inv(p_a, q);
    const double v = chi2_cdf(aq, q + 2) / chi2_cdf(aq, q);
    curve.emplace_back(q, 100.0 * r2 * (1.0 - v));
  }
  return curve;
}

}  // namespace covrep
