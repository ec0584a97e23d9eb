#pragma once

// Task data model: one unit's covariates, treatment indicator and outcome,
// optionally its simulated potential outcomes and a coverage mask for padded
// heterogeneous-dimension settings.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "covrep/matrix.hpp"

namespace covrep {

struct Sample {
  std::vector<double> x;
  int i = 0;       // treatment indicator
  double y = 0.0;  // observed outcome
  std::vector<double> mask;  // empty unless the sample was padded
  double y1 = std::numeric_limits<double>::quiet_NaN();
  double y0 = std::numeric_limits<double>::quiet_NaN();

  bool has_potential_outcomes() const {
    return !std::isnan(y1) && !std::isnan(y0);
  }
};

struct Task {
  int id = 0;
  std::vector<Sample> samples;
  int d_k = 0;
  // catalogue column of each native coordinate; empty means the identity
  // mapping 0..d_k-1
  std::vector<int> feature_ids;

  int n() const { return int(samples.size()); }
};

struct TaskSet {
  std::vector<Task> tasks;  // K historical tasks
  Task target;              // the task the experiment runs on
  int d_max = 0;
};

inline Matrix covariate_matrix(const Task& t) {
  Matrix X(t.n(), t.d_k);
  for (int i = 0; i < t.n(); ++i) {
    if (int(t.samples[i].x.size()) != t.d_k)
      throw std::invalid_argument("covariate_matrix: ragged task");
    for (int j = 0; j < t.d_k; ++j) X(i, j) = t.samples[i].x[j];
  }
  return X;
}

inline std::vector<double> outcome_vector(const Task& t) {
  std::vector<double> y(t.n());
  for (int i = 0; i < t.n(); ++i) y[i] = t.samples[i].y;
  return y;
}

inline std::vector<int> treatment_vector(const Task& t) {
  std::vector<int> v(t.n());
  for (int i = 0; i < t.n(); ++i) v[i] = t.samples[i].i;
  return v;
}

}  // namespace covrep
