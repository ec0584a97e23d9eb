#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "covrep/datagen.hpp"
#include "covrep/metalearn.hpp"

using namespace covrep;

static Task tiny_task(int id, std::vector<int> treat) {
  Task t;
  t.id = id;
  t.d_k = 1;
  for (std::size_t i = 0; i < treat.size(); ++i) {
    Sample s;
    s.x = {double(i)};
    s.i = treat[i];
    s.y = double(i) * 0.5;
    t.samples.push_back(s);
  }
  return t;
}

TEST_CASE("split partitions by arm") {
  Task t = tiny_task(3, {1, 0, 1});
  auto subs = split_tasks({t});
  REQUIRE(subs.size() == 2);
  REQUIRE(subs[0].arm == 1);
  REQUIRE(subs[0].n() == 2);
  REQUIRE(subs[1].arm == 0);
  REQUIRE(subs[1].n() == 1);
  REQUIRE(subs[0].x(0, 0) == 0.0);
  REQUIRE(subs[0].x(1, 0) == 2.0);
  REQUIRE(subs[1].x(0, 0) == 1.0);
  REQUIRE(subs[1].y[0] == 0.5);
}

TEST_CASE("two-armed tasks produce exactly 2K sub-tasks and keep every sample") {
  GroundTruthRep rep = gen_representation(RepKind::FullVariables, 4, 4, Rng(1));
  std::vector<Task> tasks;
  int total = 0;
  for (int k = 0; k < 6; ++k) {
    auto g = gen_task(rep, fixed_propensity(0.5), 40 + k, Rng(100 + k));
    g.task.id = k;
    total += g.task.n();
    tasks.push_back(g.task);
  }
  auto subs = split_tasks(tasks);
  REQUIRE(subs.size() == 12);
  int recount = 0;
  for (const auto& st : subs) recount += st.n();
  REQUIRE(recount == total);
}

TEST_CASE("one-armed tasks are dropped") {
  auto subs = split_tasks({tiny_task(0, {1, 1, 1}), tiny_task(1, {1, 0})});
  REQUIRE(subs.size() == 2);
  REQUIRE(subs[0].parent_id == 1);
}

TEST_CASE("task loss is the sum of squared residuals") {
  // identity encoder and head via linear single layers
  MetaConfig cfg;
  cfg.s = 1;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  MetaModel m = init_meta_model(1, cfg, Rng(5));
  m.encoder.weights[0](0, 0) = 1.0;
  m.head.weights[0](0, 0) = 1.0;

  Matrix X(1, 1);
  X(0, 0) = 1.0;
  REQUIRE(task_loss(m.head, m.encoder, X, {3.0}) == 4.0);  // prediction 1

  // perfect predictor
  Matrix X2(3, 1);
  std::vector<double> y2(3);
  for (int i = 0; i < 3; ++i) {
    X2(i, 0) = i - 1.0;
    y2[i] = i - 1.0;
  }
  REQUIRE(task_loss(m.head, m.encoder, X2, y2) == 0.0);

  // random batch against an independent recomputation
  Rng rng(6);
  Matrix X3(20, 1);
  std::vector<double> y3(20);
  for (int i = 0; i < 20; ++i) {
    X3(i, 0) = rng.uniform(-2, 2);
    y3[i] = rng.uniform(-2, 2);
  }
  double expect = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double r = X3(i, 0) - y3[i];
    expect += r * r;
  }
  REQUIRE(std::fabs(task_loss(m.head, m.encoder, X3, y3) - expect) < 1e-12);
}

TEST_CASE("empty batch loss is zero") {
  MetaConfig cfg;
  cfg.s = 1;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  MetaModel m = init_meta_model(1, cfg, Rng(5));
  Matrix X(0, 1);
  REQUIRE(task_loss(m.head, m.encoder, X, {}) == 0.0);
}

TEST_CASE("inner split is a disjoint cover") {
  Rng rng(9);
  for (int n : {5, 32, 100}) {
    for (int shots : {1, 16, 32, 200}) {
      InnerSplit sp = draw_inner_split(n, shots, rng);
      REQUIRE(int(sp.inner.size()) == std::min(shots, n));
      REQUIRE(int(sp.inner.size() + sp.outer.size()) == n);
      std::vector<int> seen(n, 0);
      for (int i : sp.inner) ++seen[i];
      for (int i : sp.outer) ++seen[i];
      for (int c : seen) REQUIRE(c == 1);
    }
  }
}

TEST_CASE("zero-rate adaptation returns the meta head unchanged") {
  MetaConfig cfg;
  cfg.s = 3;
  cfg.inner_rate = 0.0;
  MetaModel m = init_meta_model(4, cfg, Rng(11));
  SubTask st;
  st.x = Matrix(5, 4);
  Rng rng(12);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  st.y = {0.1, 0.2, 0.3, 0.4, 0.5};
  MlpParams head = adapt(m, st, cfg);
  REQUIRE(flatten(head) == flatten(m.head));
}

TEST_CASE("perfectly fit sub-task leaves the head at a fixpoint") {
  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.05;
  cfg.inner_steps_adapt = 25;
  MetaModel m = init_meta_model(2, cfg, Rng(13));
  SubTask st;
  st.x = Matrix(6, 2);
  Rng rng(14);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  st.y.resize(6);
  for (int i = 0; i < 6; ++i) {
    // targets manufactured to equal the model's own predictions
    std::vector<double> x = {st.x(i, 0), st.x(i, 1)};
    st.y[i] = forward(m.head, forward(m.encoder, x))[0];
  }
  MlpParams head = adapt(m, st, cfg);
  REQUIRE(flatten(head) == flatten(m.head));
}

TEST_CASE("one adaptation step matches the normal-equations gradient") {
  MetaConfig cfg;
  cfg.s = 3;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.02;
  cfg.inner_steps_adapt = 1;
  MetaModel m = init_meta_model(3, cfg, Rng(15));
  // identity encoder so the features are the raw covariates
  m.encoder.weights[0] = Matrix::identity(3);

  SubTask st;
  const int n = 8;
  st.x = Matrix(n, 3);
  st.y.resize(n);
  Rng rng(16);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  for (auto& v : st.y) v = rng.uniform(-1, 1);

  MlpParams head = adapt(m, st, cfg);

  // gradient of the mean squared residual: (2/n) X^T (X w + c - y)
  std::vector<double> w = {m.head.weights[0](0, 0), m.head.weights[0](0, 1),
                           m.head.weights[0](0, 2)};
  const double c = m.head.biases[0][0];
  std::vector<double> resid(n);
  for (int i = 0; i < n; ++i) {
    double pred = c;
    for (int j = 0; j < 3; ++j) pred += w[j] * st.x(i, j);
    resid[i] = pred - st.y[i];
  }
  for (int j = 0; j < 3; ++j) {
    double g = 0.0;
    for (int i = 0; i < n; ++i) g += 2.0 * resid[i] * st.x(i, j) / n;
    REQUIRE(std::fabs(head.weights[0](0, j) - (w[j] - 0.02 * g)) < 1e-14);
  }
  double gb = 0.0;
  for (int i = 0; i < n; ++i) gb += 2.0 * resid[i] / n;
  REQUIRE(std::fabs(head.biases[0][0] - (c - 0.02 * gb)) < 1e-14);
}

TEST_CASE("meta loss averages post-adaptation losses") {
  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {8};
  cfg.inner_steps_adapt = 0;  // adaptation disabled: plain losses
  MetaModel m = init_meta_model(3, cfg, Rng(21));

  Rng rng(22);
  std::vector<SubTask> subs;
  for (int k = 0; k < 4; ++k) {
    SubTask st;
    st.x = Matrix(10, 3);
    for (auto& v : st.x.a) v = rng.uniform(-1, 1);
    st.y.resize(10);
    for (auto& v : st.y) v = rng.uniform(-1, 1);
    subs.push_back(std::move(st));
  }

  double expect = 0.0;
  for (const auto& st : subs) expect += task_loss(m.head, m.encoder, st);
  expect /= 4.0;
  REQUIRE(std::fabs(meta_loss(m, subs, cfg) - expect) < 1e-12);

  // a single sub-task collapses to that sub-task's loss
  std::vector<SubTask> one = {subs[0]};
  REQUIRE(meta_loss(m, one, cfg) == task_loss(m.head, m.encoder, subs[0]));

  // identical sub-tasks collapse likewise, now with adaptation on
  cfg.inner_steps_adapt = 3;
  cfg.inner_rate = 0.01;
  std::vector<SubTask> same = {subs[1], subs[1], subs[1]};
  const double li = task_loss(adapt(m, subs[1], cfg), m.encoder, subs[1]);
  REQUIRE(std::fabs(meta_loss(m, same, cfg) - li) < 1e-12);
}

TEST_CASE("zero rates make training the identity on parameters") {
  GroundTruthRep rep = gen_representation(RepKind::FullVariables, 3, 3, Rng(30));
  std::vector<Task> tasks;
  for (int k = 0; k < 3; ++k)
    tasks.push_back(gen_task(rep, fixed_propensity(0.5), 30, Rng(31 + k)).task);
  auto subs = split_tasks(tasks);

  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {6};
  cfg.inner_rate = 0.0;
  cfg.outer_rate_head = 0.0;
  cfg.outer_rate_encoder = 0.0;
  cfg.meta_iters = 25;
  cfg.batch_tasks = 2;
  MetaModel trained = maml_train(subs, 3, cfg, Rng(77));
  MetaModel init = init_meta_model(3, cfg, Rng(77).derive("init"));
  REQUIRE(flatten(trained.encoder) == flatten(init.encoder));
  REQUIRE(flatten(trained.head) == flatten(init.head));
}

TEST_CASE("one outer step on one linear sub-task is a least-squares step") {
  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.0;  // adapted head equals the meta head
  cfg.outer_rate_head = 1e-3;
  cfg.outer_rate_encoder = 1e-3;
  cfg.batch_tasks = 1;
  cfg.inner_shots = 3;
  cfg.meta_iters = 1;

  SubTask st;
  const int n = 9;
  st.x = Matrix(n, 2);
  st.y.resize(n);
  Rng rng(41);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  for (auto& v : st.y) v = rng.uniform(-1, 1);

  const std::uint64_t seed = 4242;
  MetaModel out = maml_train({st}, 2, cfg, Rng(seed));

  // replicate the initialization and the documented draw streams
  MetaModel m0 = init_meta_model(2, cfg, Rng(seed).derive("init"));
  Rng rb = Rng(seed).derive("iter/0");
  (void)rb.below(1);  // the batch pick
  Rng rs = Rng(seed).derive("iter/0/split/0");
  InnerSplit sp = draw_inner_split(n, cfg.inner_shots, rs);
  REQUIRE(sp.outer.size() == 6);

  // summed least-squares gradients over the outer rows:
  //   g_w = 2 H^T r, g_c = 2 sum r, g_E = 2 sum r_i w x_i^T
  const Matrix& E = m0.encoder.weights[0];  // 2x2 linear encoder
  std::vector<double> w = {m0.head.weights[0](0, 0), m0.head.weights[0](0, 1)};
  const double c = m0.head.biases[0][0];
  Matrix gE(2, 2);
  std::vector<double> gw(2, 0.0);
  double gc = 0.0;
  for (int row : sp.outer) {
    double h[2];
    for (int p = 0; p < 2; ++p)
      h[p] = E(p, 0) * st.x(row, 0) + E(p, 1) * st.x(row, 1);
    const double r = w[0] * h[0] + w[1] * h[1] + c - st.y[row];
    for (int p = 0; p < 2; ++p) gw[p] += 2.0 * r * h[p];
    gc += 2.0 * r;
    for (int p = 0; p < 2; ++p)
      for (int q = 0; q < 2; ++q) gE(p, q) += 2.0 * r * w[p] * st.x(row, q);
  }
  for (int p = 0; p < 2; ++p)
    REQUIRE(std::fabs(out.head.weights[0](0, p) - (w[p] - 1e-3 * gw[p])) < 1e-12);
  REQUIRE(std::fabs(out.head.biases[0][0] - (c - 1e-3 * gc)) < 1e-12);
  for (int p = 0; p < 2; ++p)
    for (int q = 0; q < 2; ++q)
      REQUIRE(std::fabs(out.encoder.weights[0](p, q) -
                        (E(p, q) - 1e-3 * gE(p, q))) < 1e-12);
}

TEST_CASE("outer update direction matches finite differences on a toy net") {
  // linear 2->1 encoder (3 params) + linear 1->1 head (2 params)
  MetaConfig cfg;
  cfg.s = 1;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.05;
  cfg.outer_rate_head = 1.0;  // update = exactly minus the gradient
  cfg.outer_rate_encoder = 1.0;
  cfg.batch_tasks = 2;
  cfg.inner_shots = 4;
  cfg.meta_iters = 1;

  std::vector<SubTask> subs(2);
  Rng rng(55);
  for (auto& st : subs) {
    st.x = Matrix(10, 2);
    for (auto& v : st.x.a) v = rng.uniform(-1, 1);
    st.y.resize(10);
    for (auto& v : st.y) v = rng.uniform(-1, 1);
  }

  const std::uint64_t seed = 808;
  MetaModel out = maml_train(subs, 2, cfg, Rng(seed));
  MetaModel m0 = init_meta_model(2, cfg, Rng(seed).derive("init"));

  // replicate the batch draws
  Rng rb = Rng(seed).derive("iter/0");
  std::vector<int> picks = {int(rb.below(2)), int(rb.below(2))};
  std::vector<InnerSplit> splits;
  for (int i = 0; i < 2; ++i) {
    Rng rs = Rng(seed).derive("iter/0/split/" + std::to_string(i));
    splits.push_back(draw_inner_split(10, cfg.inner_shots, rs));
  }

  // adapted heads, computed independently from the inner rows
  auto adapt_once = [&](int slot) {
    const SubTask& st = subs[picks[slot]];
    const InnerSplit& sp = splits[slot];
    const Matrix& E = m0.encoder.weights[0];
    double w = m0.head.weights[0](0, 0), c = m0.head.biases[0][0];
    double gw = 0, gc = 0;
    for (int row : sp.inner) {
      const double h = E(0, 0) * st.x(row, 0) + E(0, 1) * st.x(row, 1);
      const double r = w * h + c - st.y[row];
      gw += 2 * r * h;
      gc += 2 * r;
    }
    return std::pair<double, double>{w - cfg.inner_rate * gw,
                                     c - cfg.inner_rate * gc};
  };

  // post-adaptation outer loss as a function of (head w|c, encoder row),
  // adapted parameters held constant
  auto outer_loss = [&](double w1, double c1, double w2, double c2,
                        const Matrix& E) {
    double total = 0;
    const double ws[2] = {w1, w2};
    const double cs[2] = {c1, c2};
    for (int slot = 0; slot < 2; ++slot) {
      const SubTask& st = subs[picks[slot]];
      for (int row : splits[slot].outer) {
        const double h = E(0, 0) * st.x(row, 0) + E(0, 1) * st.x(row, 1);
        const double r = ws[slot] * h + cs[slot] - st.y[row];
        total += r * r;
      }
    }
    return total;
  };

  auto [w1, c1] = adapt_once(0);
  auto [w2, c2] = adapt_once(1);
  const Matrix& E0 = m0.encoder.weights[0];

  // head direction: gradient w.r.t. the adapted parameters, both slots share
  // the meta head so contributions add
  const double h = 1e-6;
  const double gw_fd = (outer_loss(w1 + h, c1, w2 + h, c2, E0) -
                        outer_loss(w1 - h, c1, w2 - h, c2, E0)) /
                       (2 * h);
  const double gc_fd = (outer_loss(w1, c1 + h, w2, c2 + h, E0) -
                        outer_loss(w1, c1 - h, w2, c2 - h, E0)) /
                       (2 * h);
  const double gw_used = m0.head.weights[0](0, 0) - out.head.weights[0](0, 0);
  const double gc_used = m0.head.biases[0][0] - out.head.biases[0][0];
  REQUIRE(std::fabs(gw_used - gw_fd) / std::max(1.0, std::fabs(gw_fd)) < 1e-3);
  REQUIRE(std::fabs(gc_used - gc_fd) / std::max(1.0, std::fabs(gc_fd)) < 1e-3);

  for (int q = 0; q < 2; ++q) {
    Matrix Ep = E0, Em = E0;
    Ep(0, q) += h;
    Em(0, q) -= h;
    const double g_fd =
        (outer_loss(w1, c1, w2, c2, Ep) - outer_loss(w1, c1, w2, c2, Em)) /
        (2 * h);
    const double g_used =
        m0.encoder.weights[0](0, q) - out.encoder.weights[0](0, q);
    REQUIRE(std::fabs(g_used - g_fd) / std::max(1.0, std::fabs(g_fd)) < 1e-3);
  }
}

TEST_CASE("finite-difference mode agrees at zero inner rate and departs otherwise") {
  MetaConfig cfg;
  cfg.s = 1;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.0;
  cfg.outer_rate_head = 0.01;
  cfg.outer_rate_encoder = 0.01;
  cfg.batch_tasks = 1;
  cfg.inner_shots = 3;
  cfg.meta_iters = 2;

  SubTask st;
  st.x = Matrix(8, 2);
  st.y.resize(8);
  Rng rng(66);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  for (auto& v : st.y) v = rng.uniform(-1, 1);

  MetaModel first = maml_train({st}, 2, cfg, Rng(9001));
  cfg.second_order_fd = true;
  MetaModel exact = maml_train({st}, 2, cfg, Rng(9001));
  auto fa = flatten(first.encoder), fb = flatten(exact.encoder);
  for (std::size_t i = 0; i < fa.size(); ++i)
    REQUIRE(std::fabs(fa[i] - fb[i]) < 1e-7);

  // with adaptation on, the exact gradient picks up second-order terms
  cfg.inner_rate = 0.1;
  cfg.second_order_fd = false;
  MetaModel f2 = maml_train({st}, 2, cfg, Rng(9001));
  cfg.second_order_fd = true;
  MetaModel e2 = maml_train({st}, 2, cfg, Rng(9001));
  double max_diff = 0;
  auto ga = flatten(f2.head), gb = flatten(e2.head);
  for (std::size_t i = 0; i < ga.size(); ++i)
    max_diff = std::max(max_diff, std::fabs(ga[i] - gb[i]));
  REQUIRE(max_diff > 1e-9);
}

TEST_CASE("divergence aborts with a diagnostic") {
  SubTask st;
  st.x = Matrix(4, 1);
  st.y = {1e5, -1e5, 1e5, -1e5};
  Rng rng(71);
  for (auto& v : st.x.a) v = rng.uniform(-1, 1);
  MetaConfig cfg;
  cfg.s = 1;
  cfg.encoder_hidden = {};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.0;
  cfg.outer_rate_head = 10.0;  // hopeless step size
  cfg.batch_tasks = 1;
  cfg.inner_shots = 1;
  cfg.meta_iters = 50;
  REQUIRE_THROWS_AS(maml_train({st}, 1, cfg, Rng(72)), std::runtime_error);
}

TEST_CASE("learned features beat raw covariates for few-shot fitting") {
  // The regime where a low-dimensional representation pays off: the fresh
  // task offers fewer fitting points (200) than the raw covariate dimension
  // (d = 300), so a raw least-squares fit is underdetermined and overfits
  // badly while the compact learned features leave plenty of slack.
  const int d = 300, r = 5, n_fit = 200;
  double rep_total = 0.0, raw_total = 0.0;
  int rep_wins = 0;
  for (int seedrep = 0; seedrep < 5; ++seedrep) {
    const std::uint64_t seed = 1000 + seedrep;
    GroundTruthRep rep =
        gen_representation(RepKind::LinearCombination, d, r, Rng(seed, "rep"));
    std::vector<Task> tasks;
    for (int k = 0; k < 10; ++k) {
      auto g = gen_task(rep, fixed_propensity(0.5), 300, Rng(seed, "task/" + std::to_string(k)));
      g.task.id = k;
      tasks.push_back(g.task);
    }
    auto subs = split_tasks(tasks);

    MetaConfig cfg;
    cfg.s = r;
    cfg.encoder_hidden = {32, 32};
    cfg.head_class = HeadClass::Linear;
    cfg.inner_rate = 0.001;
    cfg.outer_rate_head = 3e-4;
    cfg.outer_rate_encoder = 3e-4;
    cfg.batch_tasks = 4;
    cfg.inner_shots = 32;
    cfg.meta_iters = 400;
    MetaModel m = maml_train(subs, d, cfg, Rng(seed, "train"));

    auto tgt = gen_task(rep, fixed_propensity(0.5), 400, Rng(seed, "target"));
    Matrix X = covariate_matrix(tgt.task);
    std::vector<double> y = outcome_vector(tgt.task);

    // least squares of y on given features over rows [0, n_fit), tiny ridge
    auto ls_mse = [&](const Matrix& F) {
      const int p = F.cols;
      Matrix G(p + 1, p + 1);
      std::vector<double> rhs(p + 1, 0.0);
      for (int i = 0; i < n_fit; ++i) {
        std::vector<double> f(p + 1);
        for (int j = 0; j < p; ++j) f[j] = F(i, j);
        f[p] = 1.0;
        for (int a = 0; a <= p; ++a) {
          rhs[a] += f[a] * y[i];
          for (int b = 0; b <= p; ++b) G(a, b) += f[a] * f[b];
        }
      }
      for (int a = 0; a <= p; ++a) G(a, a) += 1e-6;
      auto L = cholesky(G);
      REQUIRE(L.has_value());
      auto beta = chol_solve(*L, rhs);
      double mse = 0.0;
      for (int i = n_fit; i < 400; ++i) {
        double pred = beta[p];
        for (int j = 0; j < p; ++j) pred += beta[j] * F(i, j);
        const double e = pred - y[i];
        mse += e * e;
      }
      return mse / (400.0 - n_fit);
    };

    const double rep_mse = ls_mse(forward_batch(m.encoder, X));
    const double raw_mse = ls_mse(X);
    rep_total += rep_mse;
    raw_total += raw_mse;
    if (rep_mse < raw_mse) ++rep_wins;
  }
  REQUIRE(rep_total / 5.0 < raw_total / 5.0);
  REQUIRE(rep_wins == 5);
}

TEST_CASE("propensity training with zero rates returns the initialization") {
  GroundTruthRep rep = gen_representation(RepKind::FullVariables, 3, 3, Rng(81));
  std::vector<Task> tasks;
  for (int k = 0; k < 3; ++k)
    tasks.push_back(gen_task(rep, fixed_propensity(0.4), 30, Rng(82 + k)).task);
  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {6};
  cfg.inner_rate = 0.0;
  cfg.outer_rate_head = 0.0;
  cfg.outer_rate_encoder = 0.0;
  cfg.meta_iters = 10;
  cfg.batch_tasks = 2;
  MetaModel trained = maml_train_propensity(tasks, 3, cfg, Rng(99));
  MetaModel init = init_meta_model(3, cfg, Rng(99).derive("init"), true);
  REQUIRE(flatten(trained.encoder) == flatten(init.encoder));
  REQUIRE(flatten(trained.head) == flatten(init.head));
  REQUIRE(trained.head.output_act == Act::Sigmoid);
}

TEST_CASE("propensity model fits degenerate and balanced labels") {
  GroundTruthRep rep = gen_representation(RepKind::FullVariables, 2, 2, Rng(91));
  std::vector<Task> all_treated, balanced;
  for (int k = 0; k < 4; ++k) {
    auto g = gen_task(rep, fixed_propensity(0.5), 60, Rng(92 + k));
    Task t1 = g.task;
    for (auto& s : t1.samples) {
      s.i = 1;
      s.y = s.y1;
    }
    t1.id = k;
    all_treated.push_back(t1);
    g.task.id = k;
    balanced.push_back(g.task);
  }

  MetaConfig cfg;
  cfg.s = 2;
  cfg.encoder_hidden = {8};
  cfg.head_class = HeadClass::Linear;
  cfg.inner_rate = 0.001;
  cfg.outer_rate_head = 0.005;
  cfg.outer_rate_encoder = 0.005;
  cfg.batch_tasks = 2;
  cfg.inner_shots = 32;
  cfg.meta_iters = 1500;
  cfg.inner_steps_adapt = 50;

  MetaModel m1 = maml_train_propensity(all_treated, 2, cfg, Rng(707));
  auto subs1 = propensity_subtasks(all_treated);
  double mean1 = 0.0;
  long cnt = 0;
  for (const auto& st : subs1) {
    MlpParams head = adapt(m1, st, cfg);
    Matrix pred = forward_batch(head, forward_batch(m1.encoder, st.x));
    for (double v : pred.a) {
      mean1 += v;
      ++cnt;
    }
  }
  mean1 /= double(cnt);
  REQUIRE(std::fabs(mean1 - 1.0) < 0.05);

  MetaModel m2 = maml_train_propensity(balanced, 2, cfg, Rng(708));
  auto subs2 = propensity_subtasks(balanced);
  double mean2 = 0.0;
  cnt = 0;
  for (const auto& st : subs2) {
    MlpParams head = adapt(m2, st, cfg);
    Matrix pred = forward_batch(head, forward_batch(m2.encoder, st.x));
    for (double v : pred.a) {
      mean2 += v;
      ++cnt;
    }
  }
  mean2 /= double(cnt);
  REQUIRE(std::fabs(mean2 - 0.5) < 0.05);
}

TEST_CASE("meta loss decreases over training at a reduced protocol scale") {
  const int d = 40, r = 6;
  GroundTruthRep rep = gen_representation(RepKind::NeuralNetwork, d, r, Rng(3000, "rep"));
  std::vector<Task> tasks;
  for (int k = 0; k < 8; ++k) {
    auto g = gen_task(rep, fixed_propensity(0.5), 200, Rng(3000, "task/" + std::to_string(k)));
    g.task.id = k;
    tasks.push_back(g.task);
  }
  auto subs = split_tasks(tasks);

  MetaConfig cfg;
  cfg.s = r;
  cfg.encoder_hidden = {32, 32, 32};
  cfg.head_class = HeadClass::TanhMlp;
  cfg.head_hidden = {16, 16};
  cfg.inner_rate = 0.001;
  cfg.outer_rate_head = 3e-4;
  cfg.outer_rate_encoder = 3e-4;
  cfg.batch_tasks = 4;
  cfg.inner_shots = 32;
  cfg.meta_iters = 300;
  cfg.inner_steps_adapt = 50;

  MetaModel init = init_meta_model(d, cfg, Rng(3001).derive("init"));
  const double before = meta_loss(init, subs, cfg);
  MetaModel trained = maml_train(subs, d, cfg, Rng(3001));
  const double after = meta_loss(trained, subs, cfg);
  REQUIRE(std::isfinite(before));
  REQUIRE(after < before);
}
