#pragma once

// Batch experiment harness: a validated configuration selects one protocol
// (variance-ratio tables, padded-covariate tables, effect-curve and
// average-effect error sweeps, reduction curves, or the closed-form ratio),
// and run() wires generation -> training -> experiment -> CSV/JSON output.
// Every random draw descends from the configured seed through named streams,
// so any sub-experiment can be reproduced in isolation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "covrep/datagen.hpp"
#include "covrep/design.hpp"
#include "covrep/estimators.hpp"
#include "covrep/metalearn.hpp"
#include "covrep/serialize.hpp"

namespace covrep {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& protocol_names() {
  static const std::vector<std::string> names = {
      "table1",      "table2_padding", "cate_fig",  "ate_fixed_p",
      "ate_propensity", "rem_curves",  "theory_ratio"};
  return names;
}

inline std::string rep_kind_name(RepKind k) {
  switch (k) {
    case RepKind::FullVariables: return "full_variables";
    case RepKind::VariableSelection: return "variable_selection";
    case RepKind::LinearCombination: return "linear_combination";
    case RepKind::NeuralNetwork: return "neural_network";
  }
  throw std::invalid_argument("rep_kind_name: unknown kind");
}

inline RepKind rep_kind_from_name(const std::string& s) {
  if (s == "full_variables" || s == "full") return RepKind::FullVariables;
  if (s == "variable_selection" || s == "selection") return RepKind::VariableSelection;
  if (s == "linear_combination" || s == "linear") return RepKind::LinearCombination;
  if (s == "neural_network" || s == "nn") return RepKind::NeuralNetwork;
  throw std::runtime_error("unknown generator '" + s + "'");
}

struct ExperimentConfig {
  std::string protocol;
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  // Generator settings.
  std::string generator = "all";  // a kind token, or "all" for the four kinds
  int d = 300;
  int r = 50;
  int K = 20;
  int n_per_task = 1000;
  double noise_sd = 0.1;
  std::string task_kind = "logistic";  // "logistic" | "linear"

  // Heterogeneous-dimension settings (padded-table protocol).
  int d_max = 400;
  int d_k_min = 100;
  int d_k_max = 300;
  std::string fill_mode = "zero";  // "zero" | "feature_mean"

  // Meta-training settings.
  MetaConfig meta;

  // Design settings.
  double p_a = 0.05;
  int design_reps = 1000;
  std::vector<int> s_list = {50, 30};
  std::string threshold_mode = "monte_carlo";  // "chi_square" | "monte_carlo"
  int n_mc = 1000;
  int n_seeds = 5;

  // Estimator settings.
  std::vector<int> shots = {50, 100, 200, 500, 1000};
  std::vector<int> raw_shots;  // empty means: same as shots
  int repeats = 10;
  int crossfit_folds = 5;
  int n_eval = 1000;
  int n_target = 2000;
  int gd_steps = 2000;
  double gd_rate = 0.01;
  double gd_tol = 1e-10;

  // Closed-form protocols.
  int theory_d = 500;
  int theory_s = 20;
  double theory_p_a = 0.001;
  double curve_r2 = 0.5;
  double curve_p_a = 0.01;
  int curve_dim_min = 2;
  int curve_dim_max = 100;
};

inline json experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["protocol"] = c.protocol;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["generator"] = c.generator;
  j["d"] = c.d;
  j["r"] = c.r;
  j["K"] = c.K;
  j["n_per_task"] = c.n_per_task;
  j["noise_sd"] = c.noise_sd;
  j["task_kind"] = c.task_kind;
  j["d_max"] = c.d_max;
  j["d_k_min"] = c.d_k_min;
  j["d_k_max"] = c.d_k_max;
  j["fill_mode"] = c.fill_mode;
  j["meta"] = meta_config_to_json(c.meta);
  j["p_a"] = c.p_a;
  j["design_reps"] = c.design_reps;
  j["s_list"] = c.s_list;
  j["threshold_mode"] = c.threshold_mode;
  j["n_mc"] = c.n_mc;
  j["n_seeds"] = c.n_seeds;
  j["shots"] = c.shots;
  j["raw_shots"] = c.raw_shots;
  j["repeats"] = c.repeats;
  j["crossfit_folds"] = c.crossfit_folds;
  j["n_eval"] = c.n_eval;
  j["n_target"] = c.n_target;
  j["gd_steps"] = c.gd_steps;
  j["gd_rate"] = c.gd_rate;
  j["gd_tol"] = c.gd_tol;
  j["theory_d"] = c.theory_d;
  j["theory_s"] = c.theory_s;
  j["theory_p_a"] = c.theory_p_a;
  j["curve_r2"] = c.curve_r2;
  j["curve_p_a"] = c.curve_p_a;
  j["curve_dim_min"] = c.curve_dim_min;
  j["curve_dim_max"] = c.curve_dim_max;
  return j;
}

// Baseline training settings the protocols start from. The struct defaults of
// MetaConfig document the general-purpose method; the protocol runs use rates
// calibrated for stability at the simulation scale and a budget-conscious
// network width. A config file overrides any of this per key.
inline MetaConfig protocol_meta_defaults(const std::string& protocol) {
  MetaConfig m;
  m.inner_rate = 0.001;
  m.outer_rate_head = 5e-5;
  m.outer_rate_encoder = 5e-5;
  m.encoder_hidden = {64, 64, 64};
  m.head_hidden = {32};
  m.meta_iters = 150;
  if (protocol == "table1" || protocol == "table2_padding")
    m.head_class = HeadClass::Linear;
  else
    m.head_class = HeadClass::TanhMlp;
  return m;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  if (!j.is_object())
    throw std::runtime_error("experiment config: expected a JSON object");
  static const char* known[] = {
      "protocol",   "out_dir",     "seed",        "generator",   "d",
      "r",          "K",           "n_per_task",  "noise_sd",    "task_kind",
      "d_max",      "d_k_min",     "d_k_max",     "fill_mode",   "meta",
      "p_a",        "design_reps", "s_list",      "threshold_mode", "n_mc",
      "n_seeds",    "shots",       "raw_shots",   "repeats",     "crossfit_folds",
      "n_eval",     "n_target",    "gd_steps",    "gd_rate",     "gd_tol",
      "theory_d",   "theory_s",    "theory_p_a",  "curve_r2",    "curve_p_a",
      "curve_dim_min", "curve_dim_max"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok)
      throw std::runtime_error("experiment config: unknown key '" + item.key() + "'");
  }

  ExperimentConfig c;
  if (!j.contains("protocol"))
    throw std::runtime_error("experiment config: missing 'protocol'");
  c.protocol = j.at("protocol").get<std::string>();

  // Protocol-dependent defaults, applied before explicit keys override them.
  c.meta = protocol_meta_defaults(c.protocol);
  if (c.protocol == "ate_fixed_p" || c.protocol == "ate_propensity") c.K = 40;
  if (c.protocol == "cate_fig" || c.protocol == "ate_fixed_p" ||
      c.protocol == "ate_propensity")
    c.generator = "neural_network";
  if (c.protocol == "table2_padding") c.s_list = {80, 40};

  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("generator")) c.generator = j.at("generator").get<std::string>();
  if (j.contains("d")) c.d = j.at("d").get<int>();
  if (j.contains("r")) c.r = j.at("r").get<int>();
  if (j.contains("K")) c.K = j.at("K").get<int>();
  if (j.contains("n_per_task")) c.n_per_task = j.at("n_per_task").get<int>();
  if (j.contains("noise_sd")) c.noise_sd = j.at("noise_sd").get<double>();
  if (j.contains("task_kind")) c.task_kind = j.at("task_kind").get<std::string>();
  if (j.contains("d_max")) c.d_max = j.at("d_max").get<int>();
  if (j.contains("d_k_min")) c.d_k_min = j.at("d_k_min").get<int>();
  if (j.contains("d_k_max")) c.d_k_max = j.at("d_k_max").get<int>();
  if (j.contains("fill_mode")) c.fill_mode = j.at("fill_mode").get<std::string>();
  if (j.contains("meta")) c.meta = meta_config_from_json(j.at("meta"), c.meta);
  if (j.contains("p_a")) c.p_a = j.at("p_a").get<double>();
  if (j.contains("design_reps")) c.design_reps = j.at("design_reps").get<int>();
  if (j.contains("s_list")) c.s_list = j.at("s_list").get<std::vector<int>>();
  if (j.contains("threshold_mode"))
    c.threshold_mode = j.at("threshold_mode").get<std::string>();
  if (j.contains("n_mc")) c.n_mc = j.at("n_mc").get<int>();
  if (j.contains("n_seeds")) c.n_seeds = j.at("n_seeds").get<int>();
  if (j.contains("shots")) c.shots = j.at("shots").get<std::vector<int>>();
  if (j.contains("raw_shots")) c.raw_shots = j.at("raw_shots").get<std::vector<int>>();
  if (j.contains("repeats")) c.repeats = j.at("repeats").get<int>();
  if (j.contains("crossfit_folds")) c.crossfit_folds = j.at("crossfit_folds").get<int>();
  if (j.contains("n_eval")) c.n_eval = j.at("n_eval").get<int>();
  if (j.contains("n_target")) c.n_target = j.at("n_target").get<int>();
  if (j.contains("gd_steps")) c.gd_steps = j.at("gd_steps").get<int>();
  if (j.contains("gd_rate")) c.gd_rate = j.at("gd_rate").get<double>();
  if (j.contains("gd_tol")) c.gd_tol = j.at("gd_tol").get<double>();
  if (j.contains("theory_d")) c.theory_d = j.at("theory_d").get<int>();
  if (j.contains("theory_s")) c.theory_s = j.at("theory_s").get<int>();
  if (j.contains("theory_p_a")) c.theory_p_a = j.at("theory_p_a").get<double>();
  if (j.contains("curve_r2")) c.curve_r2 = j.at("curve_r2").get<double>();
  if (j.contains("curve_p_a")) c.curve_p_a = j.at("curve_p_a").get<double>();
  if (j.contains("curve_dim_min")) c.curve_dim_min = j.at("curve_dim_min").get<int>();
  if (j.contains("curve_dim_max")) c.curve_dim_max = j.at("curve_dim_max").get<int>();
  return c;
}

// Throws std::invalid_argument naming the first offending field. Callers map
// this to a usage error before any computation starts.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };

  const auto& names = protocol_names();
  if (std::find(names.begin(), names.end(), c.protocol) == names.end())
    fail("protocol '" + c.protocol + "' is not one of the seven known protocols");
  if (c.out_dir.empty()) fail("out_dir must not be empty");
  if (c.generator != "all") {
    try {
      rep_kind_from_name(c.generator);
    } catch (const std::exception&) {
      fail("unknown generator '" + c.generator + "'");
    }
  }
  if (c.generator == "all" &&
      (c.protocol == "cate_fig" || c.protocol == "ate_fixed_p" ||
       c.protocol == "ate_propensity"))
    fail("estimator protocols need a single generator, not 'all'");
  if (c.d < 1) fail("d must be >= 1");
  if (c.r < 1 || c.r > c.d) fail("r must lie in [1, d]");
  if (c.K < 1) fail("K must be >= 1");
  if (c.n_per_task < 2) fail("n_per_task must be >= 2");
  if (!(c.noise_sd >= 0.0)) fail("noise_sd must be >= 0");
  if (c.task_kind != "logistic" && c.task_kind != "linear")
    fail("task_kind must be 'logistic' or 'linear'");
  if (c.d_max < 1) fail("d_max must be >= 1");
  if (c.d_k_min < 1 || c.d_k_min > c.d_k_max || c.d_k_max > c.d_max)
    fail("need 1 <= d_k_min <= d_k_max <= d_max");
  if (c.fill_mode != "zero" && c.fill_mode != "feature_mean")
    fail("fill_mode must be 'zero' or 'feature_mean'");
  if (!(c.p_a > 0.0 && c.p_a <= 1.0)) fail("p_a must lie in (0, 1]");
  if (c.design_reps < 100) fail("design_reps must be >= 100");
  if (c.s_list.empty()) fail("s_list must not be empty");
  const int design_dim = c.protocol == "table2_padding" ? c.d_max : c.d;
  for (int s : c.s_list)
    if (s < 1 || s > design_dim) fail("every s in s_list must lie in [1, input dim]");
  if (c.threshold_mode != "chi_square" && c.threshold_mode != "monte_carlo")
    fail("threshold_mode must be 'chi_square' or 'monte_carlo'");
  if (c.n_mc < 100) fail("n_mc must be >= 100");
  if (c.n_seeds < 1) fail("n_seeds must be >= 1");
  if (c.shots.empty()) fail("shots must not be empty");
  for (std::size_t i = 0; i < c.shots.size(); ++i) {
    if (c.shots[i] < 1) fail("shot counts must be >= 1");
    if (i > 0 && c.shots[i] <= c.shots[i - 1]) fail("shots must be strictly increasing");
  }
  for (std::size_t i = 0; i < c.raw_shots.size(); ++i) {
    if (c.raw_shots[i] < 1) fail("raw shot counts must be >= 1");
    if (i > 0 && c.raw_shots[i] <= c.raw_shots[i - 1])
      fail("raw_shots must be strictly increasing");
  }
  if (c.repeats < 2) fail("repeats must be >= 2");
  if (c.crossfit_folds < 2) fail("crossfit_folds must be >= 2");
  if (c.n_eval < 1) fail("n_eval must be >= 1");
  int max_shot = c.shots.back();
  if (!c.raw_shots.empty()) max_shot = std::max(max_shot, c.raw_shots.back());
  if (c.n_target < max_shot) fail("n_target must cover the largest shot count");
  if (c.gd_steps < 0) fail("gd_steps must be >= 0");
  if (!(c.gd_rate >= 0.0)) fail("gd_rate must be >= 0");
  if (!(c.gd_tol >= 0.0)) fail("gd_tol must be >= 0");
  if (c.theory_s < 1 || c.theory_s > c.theory_d) fail("need 1 <= theory_s <= theory_d");
  if (!(c.theory_p_a > 0.0 && c.theory_p_a < 1.0)) fail("theory_p_a must lie in (0, 1)");
  if (!(c.curve_r2 >= 0.0 && c.curve_r2 <= 1.0)) fail("curve_r2 must lie in [0, 1]");
  if (!(c.curve_p_a > 0.0 && c.curve_p_a < 1.0)) fail("curve_p_a must lie in (0, 1)");
  if (c.curve_dim_min < 1 || c.curve_dim_min > c.curve_dim_max)
    fail("need 1 <= curve_dim_min <= curve_dim_max");
  if (c.meta.s < 1) fail("meta.s must be >= 1");
  if (c.meta.inner_rate < 0 || c.meta.outer_rate_head < 0 || c.meta.outer_rate_encoder < 0)
    fail("meta rates must be >= 0");
  if (c.meta.batch_tasks < 1) fail("meta.batch_tasks must be >= 1");
  if (c.meta.inner_shots < 1) fail("meta.inner_shots must be >= 1");
  if (c.meta.meta_iters < 0) fail("meta.meta_iters must be >= 0");
  if (c.meta.inner_steps_adapt < 0) fail("meta.inner_steps_adapt must be >= 0");
  for (int w : c.meta.encoder_hidden)
    if (w < 1) fail("meta.encoder_hidden widths must be >= 1");
  for (int w : c.meta.head_hidden)
    if (w < 1) fail("meta.head_hidden widths must be >= 1");
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<RepKind> generators_for(const ExperimentConfig& c) {
  if (c.generator == "all")
    return {RepKind::FullVariables, RepKind::VariableSelection,
            RepKind::LinearCombination, RepKind::NeuralNetwork};
  return {rep_kind_from_name(c.generator)};
}

inline TaskFunctionKind task_kind_of(const ExperimentConfig& c) {
  return c.task_kind == "linear" ? TaskFunctionKind::Linear
                                 : TaskFunctionKind::Logistic;
}

inline ThresholdMode threshold_mode_of(const ExperimentConfig& c) {
  return c.threshold_mode == "chi_square" ? ThresholdMode::ChiSquare
                                          : ThresholdMode::MonteCarlo;
}

inline FillMode fill_mode_of(const ExperimentConfig& c) {
  return c.fill_mode == "zero" ? FillMode::Zero : FillMode::FeatureMean;
}

// Keep only the listed catalogue columns of a full-dimension task; outcomes
// stay as computed from the full covariate vector.
inline Task restrict_columns(const Task& full, const std::vector<int>& feats) {
  Task t;
  t.id = full.id;
  t.d_k = static_cast<int>(feats.size());
  t.feature_ids = feats;
  t.samples.reserve(full.samples.size());
  for (const Sample& s : full.samples) {
    Sample out;
    out.i = s.i;
    out.y = s.y;
    out.y1 = s.y1;
    out.y0 = s.y0;
    out.x.reserve(feats.size());
    for (int f : feats) out.x.push_back(s.x[static_cast<std::size_t>(f)]);
    t.samples.push_back(std::move(out));
  }
  return t;
}

inline std::vector<int> draw_feature_subset(int d_max, int d_k, Rng rng) {
  std::vector<int> all(static_cast<std::size_t>(d_max));
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(all);
  all.resize(static_cast<std::size_t>(d_k));
  std::sort(all.begin(), all.end());
  return all;
}

inline Task first_n(const Task& t, int n) {
  Task out;
  out.id = t.id;
  out.d_k = t.d_k;
  out.feature_ids = t.feature_ids;
  out.samples.assign(t.samples.begin(), t.samples.begin() + n);
  return out;
}

// Exact pass-through network: one layer, identity weights, identity output.
inline MlpParams make_identity_mlp(int d) {
  MlpParams p;
  p.layer_dims = {d, d};
  p.hidden_act = Act::ReLU;
  p.output_act = Act::Identity;
  Matrix w(d, d);
  for (int i = 0; i < d; ++i) w(i, i) = 1.0;
  p.weights.push_back(std::move(w));
  p.biases.emplace_back(static_cast<std::size_t>(d), 0.0);
  return p;
}

inline double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

// Per-(method, shots) mean of the sq_error column with a normal-approximation
// 95% half-width, groups in first-appearance order. For estimate rows the
// mean of squared errors is the MSE; for rows that already carry a mean
// squared error in sq_error it is the cross-repeat average.
inline std::vector<AteSummaryRow> summarize_rows(const std::vector<AteResultRow>& rows) {
  std::vector<AteSummaryRow> out;
  std::vector<std::vector<double>> groups;
  for (const AteResultRow& r : rows) {
    std::size_t g = 0;
    for (; g < out.size(); ++g)
      if (out[g].protocol == r.protocol && out[g].method == r.method &&
          out[g].shots == r.shots)
        break;
    if (g == out.size()) {
      AteSummaryRow s;
      s.protocol = r.protocol;
      s.method = r.method;
      s.shots = r.shots;
      out.push_back(s);
      groups.emplace_back();
    }
    groups[g].push_back(r.sq_error);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    const std::vector<double>& sq = groups[g];
    if (sq.size() < 2)
      throw std::runtime_error("summary: need at least two repeats per cell");
    const double mean = mean_of(sq);
    double var = 0.0;
    for (double v : sq) var += (v - mean) * (v - mean);
    var /= static_cast<double>(sq.size() - 1);
    out[g].mse = mean;
    out[g].ci95_halfwidth = 1.96 * std::sqrt(var / static_cast<double>(sq.size()));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Protocol runners (each returns the result file names it wrote)
// ---------------------------------------------------------------------------

inline constexpr const char* kTheoryCsvHeader = "d,s,p_a,ratio";

inline std::vector<std::string> run_theory_ratio(const ExperimentConfig& c) {
  const double ratio = theoretical_ratio(c.theory_d, c.theory_s, c.theory_p_a);
  std::ostringstream os;
  os << kTheoryCsvHeader << '\n'
     << c.theory_d << ',' << c.theory_s << ',' << format_double(c.theory_p_a)
     << ',' << format_double(ratio) << '\n';
  write_text_file(c.out_dir + "/theory_ratio.csv", os.str());
  return {"theory_ratio.csv"};
}

inline std::vector<std::string> run_rem_curves(const ExperimentConfig& c) {
  std::vector<int> dims;
  for (int q = c.curve_dim_min; q <= c.curve_dim_max; ++q) dims.push_back(q);
  const auto curve = percent_variance_reduction(c.curve_r2, c.curve_p_a, dims);
  std::ostringstream os;
  write_curve_csv(os, curve);
  write_text_file(c.out_dir + "/reduction_curve.csv", os.str());
  return {"reduction_curve.csv"};
}

namespace detail {

struct TableCell {
  RepKind kind;
  int seed_index = 0;
  std::uint64_t cell_seed = 0;
};

inline CheckpointFn checkpoint_writer(const ExperimentConfig& c, const std::string& tag,
                                      const MetaConfig& mcfg,
                                      std::vector<std::string>* files) {
  return [out = c.out_dir, tag, mcfg, files, seed = c.seed](int iter, const MetaModel& m) {
    std::filesystem::create_directories(out + "/checkpoints");
    const std::string name =
        "checkpoints/" + tag + "_iter" + std::to_string(iter) + ".json";
    save_meta_model(out + "/" + name, m, mcfg, seed);
    files->push_back(name);
  };
}

}  // namespace detail

// Variance-ratio tables. Cells: each generator x {raw covariates, one run per
// configured representation width}, averaged over n_seeds independent root
// seeds. The padded variant draws a native dimension and feature subset per
// task before padding everything to the catalogue dimension.
inline std::vector<std::string> run_table(const ExperimentConfig& c, bool padded,
                                          std::vector<std::string>* checkpoint_files) {
  const auto kinds = detail::generators_for(c);
  const TaskFunctionKind fkind = detail::task_kind_of(c);
  const ThresholdMode tmode = detail::threshold_mode_of(c);
  const int input_dim = padded ? c.d_max : c.d;
  const int gen_dim = padded ? c.d_max : c.d;

  std::vector<DesignResultRow> rows;
  for (RepKind kind : kinds) {
    const std::string token = rep_kind_name(kind);
    for (int i = 0; i < c.n_seeds; ++i) {
      const std::uint64_t cell_seed = c.seed + static_cast<std::uint64_t>(i);
      Rng root = Rng(cell_seed).derive(c.protocol + "/" + token);

      GroundTruthRep truth = gen_representation(kind, gen_dim, c.r, root.derive("truth"));

      std::vector<Task> tasks;
      for (int k = 0; k < c.K; ++k) {
        auto g = gen_task(truth, fixed_propensity(0.5), c.n_per_task,
                          root.derive("task/" + std::to_string(k)), fkind, c.noise_sd);
        g.task.id = k;
        if (padded) {
          const int span = c.d_k_max - c.d_k_min + 1;
          const int d_k = c.d_k_min +
                          static_cast<int>(root.derive("dims/" + std::to_string(k))
                                               .below(static_cast<std::uint64_t>(span)));
          const auto feats = detail::draw_feature_subset(
              c.d_max, d_k, root.derive("feats/" + std::to_string(k)));
          g.task = detail::restrict_columns(g.task, feats);
          g.task.id = k;
        }
        tasks.push_back(std::move(g.task));
      }

      auto tgt = gen_task(truth, fixed_propensity(0.5), c.n_per_task,
                          root.derive("target"), fkind, c.noise_sd);
      Task target = std::move(tgt.task);
      if (padded) {
        const int span = c.d_k_max - c.d_k_min + 1;
        const int d_k = c.d_k_min + static_cast<int>(root.derive("dims/target")
                                                         .below(static_cast<std::uint64_t>(span)));
        const auto feats =
            detail::draw_feature_subset(c.d_max, d_k, root.derive("feats/target"));
        target = detail::restrict_columns(target, feats);
      }

      Task design_target;
      std::vector<Task> train_tasks;
      if (padded) {
        TaskSet ps = pad_taskset(tasks, target, c.d_max, detail::fill_mode_of(c));
        train_tasks = std::move(ps.tasks);
        design_target = std::move(ps.target);
      } else {
        train_tasks = std::move(tasks);
        design_target = std::move(target);
      }

      Rng raw_rng = root.derive("design/raw");
      DesignExperimentReport raw =
          variance_ratio_experiment(design_target, CovariatesMode::Raw, nullptr, c.p_a,
                                    c.design_reps, raw_rng, tmode, c.n_mc);
      rows.push_back({token, "raw", 0, c.p_a, c.design_reps, raw.var_rem, raw.var_cr,
                      raw.ratio, raw.accept_rate, cell_seed});

      for (int s : c.s_list) {
        MetaConfig mcfg = c.meta;
        mcfg.s = s;
        const std::string tag =
            token + "_seed" + std::to_string(i) + "_s" + std::to_string(s);
        MetaModel model = maml_train(
            split_tasks(train_tasks), input_dim, mcfg,
            root.derive("train/s" + std::to_string(s)),
            detail::checkpoint_writer(c, tag, mcfg, checkpoint_files));
        Rng rep_rng = root.derive("design/s" + std::to_string(s));
        DesignExperimentReport rep = variance_ratio_experiment(
            design_target, CovariatesMode::Representation, &model, c.p_a,
            c.design_reps, rep_rng, tmode, c.n_mc);
        rows.push_back({token, "representation", s, c.p_a, c.design_reps, rep.var_rem,
                        rep.var_cr, rep.ratio, rep.accept_rate, cell_seed});
      }
    }
  }

  std::ostringstream os;
  write_design_csv(os, rows);
  write_text_file(c.out_dir + "/design_results.csv", os.str());

  // Row/column table: one row per generator, mean ratio over seeds per mode.
  std::ostringstream table;
  table << "generator,original";
  for (int s : c.s_list) table << ",s" << s;
  table << '\n';
  for (RepKind kind : kinds) {
    const std::string token = rep_kind_name(kind);
    table << token;
    auto mean_ratio = [&rows, &token](const std::string& mode, int s) {
      std::vector<double> v;
      for (const DesignResultRow& r : rows)
        if (r.generator == token && r.covariates_mode == mode && r.s == s)
          v.push_back(r.ratio);
      return detail::mean_of(v);
    };
    table << ',' << format_double(mean_ratio("raw", 0));
    for (int s : c.s_list) table << ',' << format_double(mean_ratio("representation", s));
    table << '\n';
  }
  write_text_file(c.out_dir + "/design_table.csv", table.str());
  return {"design_results.csv", "design_table.csv"};
}

// Conditional-effect error sweep: one trained representation; per repeat a
// fresh validation task; per shot count the arm-wise heads are refit on the
// first `shots` samples and scored against the generator's true effect curve
// on fresh draws. Rows carry the per-repeat mean squared error in sq_error
// (estimate mirrors it; true_value is zero).
inline std::vector<std::string> run_cate_fig(const ExperimentConfig& c,
                                             std::vector<std::string>* checkpoint_files) {
  const RepKind kind = rep_kind_from_name(c.generator);
  const TaskFunctionKind fkind = detail::task_kind_of(c);
  Rng root(c.seed);
  GroundTruthRep truth = gen_representation(kind, c.d, c.r, root.derive("truth"));

  std::vector<Task> tasks;
  for (int k = 0; k < c.K; ++k) {
    auto g = gen_task(truth, fixed_propensity(0.5), c.n_per_task,
                      root.derive("task/" + std::to_string(k)), fkind, c.noise_sd);
    g.task.id = k;
    tasks.push_back(std::move(g.task));
  }
  MetaModel model =
      maml_train(split_tasks(tasks), c.d, c.meta, root.derive("train"),
                 detail::checkpoint_writer(c, "cate", c.meta, checkpoint_files));

  const CateFitConfig fit{c.gd_steps, c.gd_rate, c.gd_tol};
  const std::vector<int>& raw_shots = c.raw_shots.empty() ? c.shots : c.raw_shots;

  std::vector<AteResultRow> rows;
  for (int rep = 0; rep < c.repeats; ++rep) {
    const std::string rtag = std::to_string(rep);
    auto vt = gen_task(truth, fixed_propensity(0.5), c.n_target,
                       root.derive("target/" + rtag), fkind, c.noise_sd);
    CateOracle oracle{truth, vt.truth.treated, vt.truth.control};

    for (int shot : c.shots) {
      Task sub = detail::first_n(vt.task, shot);
      Rng fr = root.derive("fit/rep/" + rtag + "/" + std::to_string(shot));
      CateModel m = fit_cate(sub, model, c.meta.head_class, FitMode::FromMeta, fr, fit);
      const double mse =
          cate_mse(m, oracle, c.n_eval,
                   root.derive("eval/rep/" + rtag + "/" + std::to_string(shot)));
      rows.push_back({c.protocol, "rep", shot, rep, mse, 0.0, mse, c.seed});
    }
    for (int shot : raw_shots) {
      Task sub = detail::first_n(vt.task, shot);
      Rng fr = root.derive("fit/raw/" + rtag + "/" + std::to_string(shot));
      CateModel m = fit_cate_raw(sub, c.meta.head_class, c.meta.head_hidden, fr, fit);
      const double mse =
          cate_mse(m, oracle, c.n_eval,
                   root.derive("eval/raw/" + rtag + "/" + std::to_string(shot)));
      rows.push_back({c.protocol, "raw", shot, rep, mse, 0.0, mse, c.seed});
    }
  }

  std::ostringstream os;
  write_ate_csv(os, rows);
  write_text_file(c.out_dir + "/estimates.csv", os.str());
  std::ostringstream ss;
  write_ate_summary_csv(ss, detail::summarize_rows(rows));
  write_text_file(c.out_dir + "/summary.csv", ss.str());
  return {"estimates.csv", "summary.csv"};
}

namespace detail {

// Scratch propensity fit on raw covariates: a fresh network trained on the
// treatment indicators of the given task, mirroring the baseline that learns
// everything from the target data alone.
inline MetaModel fit_raw_propensity(const Task& sub, const std::vector<int>& hidden,
                                    const CateFitConfig& fit, Rng rng) {
  const int d = sub.d_k;
  Matrix x = covariate_matrix(sub);
  std::vector<double> ind(sub.samples.size());
  for (std::size_t i = 0; i < sub.samples.size(); ++i)
    ind[i] = static_cast<double>(sub.samples[i].i);
  std::vector<int> dims;
  dims.push_back(d);
  for (int w : hidden) dims.push_back(w);
  dims.push_back(1);
  MlpParams head = glorot_init(dims, Act::Tanh, Act::Sigmoid, rng);
  head = fit_head_gd(std::move(head), x, ind, fit);
  MetaModel m;
  m.encoder = make_identity_mlp(d);
  m.head = std::move(head);
  return m;
}

// The learned-representation propensity model, with its head adapted to the
// target task's treatment indicators (encoder frozen).
inline MetaModel adapt_propensity(const MetaModel& prop, const Task& sub,
                                  const MetaConfig& mcfg) {
  SubTask st;
  st.parent_id = sub.id;
  st.arm = -1;
  st.x = covariate_matrix(sub);
  st.y.resize(sub.samples.size());
  for (std::size_t i = 0; i < sub.samples.size(); ++i)
    st.y[i] = static_cast<double>(sub.samples[i].i);
  MetaModel adapted;
  adapted.encoder = prop.encoder;
  adapted.head = adapt(prop, st, mcfg);
  return adapted;
}

}  // namespace detail

// Average-effect error sweep (fixed assignment probability or learned
// propensity). K historical tasks each draw their own assignment mechanism;
// per repeat a fresh validation task is generated, the estimator runs on its
// first `shots` samples, and the squared error against the generator's
// population effect is recorded.
inline std::vector<std::string> run_ate(const ExperimentConfig& c, bool learned_propensity,
                                        std::vector<std::string>* checkpoint_files) {
  const RepKind kind = rep_kind_from_name(c.generator);
  const TaskFunctionKind fkind = detail::task_kind_of(c);
  Rng root(c.seed);
  GroundTruthRep truth = gen_representation(kind, c.d, c.r, root.derive("truth"));

  auto draw_mechanism = [&](const std::string& tag) -> GroundTruthPropensity {
    if (learned_propensity) return neural_propensity(c.d, root.derive("prop/" + tag));
    return fixed_propensity(root.derive("p/" + tag).uniform(0.2, 0.8));
  };

  std::vector<Task> tasks;
  for (int k = 0; k < c.K; ++k) {
    auto g = gen_task(truth, draw_mechanism(std::to_string(k)), c.n_per_task,
                      root.derive("task/" + std::to_string(k)), fkind, c.noise_sd);
    g.task.id = k;
    tasks.push_back(std::move(g.task));
  }
  MetaModel model =
      maml_train(split_tasks(tasks), c.d, c.meta, root.derive("train"),
                 detail::checkpoint_writer(c, "outcome", c.meta, checkpoint_files));
  MetaModel prop_model;
  if (learned_propensity)
    prop_model = maml_train_propensity(
        tasks, c.d, c.meta, root.derive("train_prop"),
        detail::checkpoint_writer(c, "propensity", c.meta, checkpoint_files));

  const CateFitConfig fit{c.gd_steps, c.gd_rate, c.gd_tol};
  const CrossFitConfig cf{c.crossfit_folds};
  const PropensityMode pmode = learned_propensity ? PropensityMode::LearnedPropensity
                                                  : PropensityMode::Empirical;
  const std::vector<int>& raw_shots = c.raw_shots.empty() ? c.shots : c.raw_shots;

  std::vector<AteResultRow> rows;
  for (int rep = 0; rep < c.repeats; ++rep) {
    const std::string rtag = std::to_string(rep);
    auto vt = gen_task(truth, draw_mechanism("target/" + rtag), c.n_target,
                       root.derive("target/" + rtag), fkind, c.noise_sd);
    const OracleEffects effects =
        oracle_effects(vt.task, vt.truth, truth, root.derive("oracle/" + rtag));
    const double true_ate = effects.ate_population;

    for (int shot : c.shots) {
      Task sub = detail::first_n(vt.task, shot);
      MetaModel adapted_prop;
      const MetaModel* prop_ptr = nullptr;
      if (learned_propensity) {
        adapted_prop = detail::adapt_propensity(prop_model, sub, c.meta);
        prop_ptr = &adapted_prop;
      }
      Rng er = root.derive("est/rep/" + rtag + "/" + std::to_string(shot));
      AteReport out = dr_ate(sub, model, c.meta.head_class, FitMode::FromMeta, pmode,
                             prop_ptr, cf, er, fit);
      const double sq = (out.tau_hat - true_ate) * (out.tau_hat - true_ate);
      rows.push_back({c.protocol, "rep", shot, rep, out.tau_hat, true_ate, sq, c.seed});
    }
    for (int shot : raw_shots) {
      Task sub = detail::first_n(vt.task, shot);
      MetaModel raw_prop;
      const MetaModel* prop_ptr = nullptr;
      if (learned_propensity) {
        raw_prop = detail::fit_raw_propensity(
            sub, c.meta.head_hidden, fit,
            root.derive("prop_fit/raw/" + rtag + "/" + std::to_string(shot)));
        prop_ptr = &raw_prop;
      }
      Rng er = root.derive("est/raw/" + rtag + "/" + std::to_string(shot));
      AteReport out = dr_ate_raw(sub, c.meta.head_class, c.meta.head_hidden, pmode,
                                 prop_ptr, cf, er, fit);
      const double sq = (out.tau_hat - true_ate) * (out.tau_hat - true_ate);
      rows.push_back({c.protocol, "raw", shot, rep, out.tau_hat, true_ate, sq, c.seed});
    }
  }

  std::ostringstream os;
  write_ate_csv(os, rows);
  write_text_file(c.out_dir + "/estimates.csv", os.str());
  std::ostringstream ss;
  write_ate_summary_csv(ss, detail::summarize_rows(rows));
  write_text_file(c.out_dir + "/summary.csv", ss.str());
  return {"estimates.csv", "summary.csv"};
}

// Public name for the average-effect sweep used by the two ate_* protocols.
inline std::vector<std::string> ate_mse_experiment(const ExperimentConfig& c,
                                                   bool learned_propensity,
                                                   std::vector<std::string>* checkpoints) {
  return run_ate(c, learned_propensity, checkpoints);
}

// Public name for the variance-ratio table protocols.
inline std::vector<std::string> reproduce_table(const ExperimentConfig& c,
                                                std::vector<std::string>* checkpoints) {
  if (c.protocol != "table1" && c.protocol != "table2_padding")
    throw std::invalid_argument("reproduce_table: protocol must be a table protocol");
  return run_table(c, c.protocol == "table2_padding", checkpoints);
}

// ---------------------------------------------------------------------------
// Entry point, manifest, verification
// ---------------------------------------------------------------------------

inline json run(const ExperimentConfig& c) {
  validate(c);
  std::filesystem::create_directories(c.out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::string> files;
  std::vector<std::string> checkpoints;
  if (c.protocol == "theory_ratio") files = run_theory_ratio(c);
  else if (c.protocol == "rem_curves") files = run_rem_curves(c);
  else if (c.protocol == "table1" || c.protocol == "table2_padding")
    files = reproduce_table(c, &checkpoints);
  else if (c.protocol == "cate_fig") files = run_cate_fig(c, &checkpoints);
  else if (c.protocol == "ate_fixed_p") files = ate_mse_experiment(c, false, &checkpoints);
  else files = ate_mse_experiment(c, true, &checkpoints);

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json manifest;
  manifest["format"] = "covrep-run-manifest";
  manifest["version"] = 1;
  manifest["protocol"] = c.protocol;
  manifest["seed"] = c.seed;
  manifest["config"] = experiment_config_to_json(c);
  manifest["results"] = files;
  manifest["checkpoints"] = checkpoints;
  manifest["wall_time_sec"] = wall;
  manifest["library"] = "covrep 1.0.0";
  write_text_file(c.out_dir + "/manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

// Recomputes every derived number in the output directory from the raw rows
// and the config echo; throws with a diagnostic on the first mismatch.
inline void verify_run(const std::string& dir) {
  const json manifest = json::parse(read_text_file(dir + "/manifest.json"));
  if (manifest.value("format", std::string()) != "covrep-run-manifest")
    throw std::runtime_error("verify: unrecognized manifest format");
  const ExperimentConfig c = experiment_config_from_json(manifest.at("config"));
  validate(c);

  for (const json& f : manifest.at("results"))
    if (!std::filesystem::exists(dir + "/" + f.get<std::string>()))
      throw std::runtime_error("verify: manifest lists missing file " +
                               f.get<std::string>());
  for (const json& f : manifest.at("checkpoints"))
    if (!std::filesystem::exists(dir + "/" + f.get<std::string>()))
      throw std::runtime_error("verify: manifest lists missing checkpoint " +
                               f.get<std::string>());

  if (c.protocol == "theory_ratio") {
    std::istringstream is(read_text_file(dir + "/theory_ratio.csv"));
    detail::expect_header(is, kTheoryCsvHeader);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("verify: empty ratio file");
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) throw std::runtime_error("verify: bad ratio row");
    const double expect = theoretical_ratio(static_cast<int>(parse_int(f[0])),
                                            static_cast<int>(parse_int(f[1])),
                                            parse_double(f[2]));
    if (parse_double(f[3]) != expect)
      throw std::runtime_error("verify: stored ratio differs from recomputation");
    return;
  }

  if (c.protocol == "rem_curves") {
    std::istringstream is(read_text_file(dir + "/reduction_curve.csv"));
    const auto stored = read_curve_csv(is);
    std::vector<int> dims;
    for (const auto& [q, pct] : stored) dims.push_back(q);
    const auto expect = percent_variance_reduction(c.curve_r2, c.curve_p_a, dims);
    if (stored != expect)
      throw std::runtime_error("verify: stored curve differs from recomputation");
    return;
  }

  if (c.protocol == "table1" || c.protocol == "table2_padding") {
    std::istringstream is(read_text_file(dir + "/design_results.csv"));
    const auto rows = read_design_csv(is);
    for (const DesignResultRow& r : rows)
      if (r.ratio != r.var_rem / r.var_cr)
        throw std::runtime_error("verify: a stored ratio differs from var_rem/var_cr");

    std::ostringstream table;
    table << "generator,original";
    for (int s : c.s_list) table << ",s" << s;
    table << '\n';
    std::vector<std::string> seen;
    for (const DesignResultRow& r : rows)
      if (std::find(seen.begin(), seen.end(), r.generator) == seen.end())
        seen.push_back(r.generator);
    for (const std::string& token : seen) {
      table << token;
      auto mean_ratio = [&rows, &token](const std::string& mode, int s) {
        std::vector<double> v;
        for (const DesignResultRow& r : rows)
          if (r.generator == token && r.covariates_mode == mode && r.s == s)
            v.push_back(r.ratio);
        return detail::mean_of(v);
      };
      table << ',' << format_double(mean_ratio("raw", 0));
      for (int s : c.s_list)
        table << ',' << format_double(mean_ratio("representation", s));
      table << '\n';
    }
    if (read_text_file(dir + "/design_table.csv") != table.str())
      throw std::runtime_error("verify: aggregate table differs from raw rows");
    return;
  }

  // Estimator protocols.
  std::istringstream is(read_text_file(dir + "/estimates.csv"));
  const auto rows = read_ate_csv(is);
  for (const AteResultRow& r : rows) {
    if (c.protocol == "cate_fig") {
      if (r.sq_error != r.estimate || r.true_value != 0.0)
        throw std::runtime_error("verify: effect-curve row invariant violated");
    } else {
      const double e = r.estimate - r.true_value;
      if (r.sq_error != e * e)
        throw std::runtime_error("verify: sq_error differs from (estimate-true)^2");
    }
  }
  std::ostringstream ss;
  write_ate_summary_csv(ss, detail::summarize_rows(rows));
  if (read_text_file(dir + "/summary.csv") != ss.str())
    throw std::runtime_error("verify: summary differs from raw rows");
}

}  // namespace covrep
