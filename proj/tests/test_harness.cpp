#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "covrep/harness.hpp"

using namespace covrep;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("covrep_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return read_text_file(p.string()); }

// Tiny but fully exercising configuration for a given protocol.
ExperimentConfig micro_config(const std::string& protocol, const fs::path& out) {
  json j;
  j["protocol"] = protocol;
  ExperimentConfig c = experiment_config_from_json(j);
  c.out_dir = out.string();
  c.seed = 3;
  c.d = 6;
  c.r = 2;
  c.K = 2;
  c.n_per_task = 40;
  c.meta.meta_iters = 2;
  c.meta.batch_tasks = 2;
  c.meta.inner_shots = 6;
  c.meta.encoder_hidden = {8};
  c.meta.head_hidden = {4};
  c.meta.s = 3;
  c.meta.inner_steps_adapt = 5;
  c.meta.checkpoint_every = 1;
  c.design_reps = 100;
  c.n_mc = 100;
  c.n_seeds = 1;
  c.s_list = {3};
  c.p_a = 0.3;
  c.threshold_mode = "chi_square";
  c.shots = {8, 16};
  c.raw_shots = {8};
  c.repeats = 2;
  c.crossfit_folds = 2;
  c.n_eval = 50;
  c.n_target = 20;
  c.gd_steps = 30;
  c.generator = "linear_combination";
  return c;
}

// Re-runs the same protocol into a second directory and checks every result
// file (and checkpoint) is byte-identical; the manifest differs (wall time,
// out_dir echo) and is excluded.
void check_deterministic(const ExperimentConfig& base, const std::string& tag) {
  ExperimentConfig c2 = base;
  fs::path alt = scratch_dir(tag + "_rerun");
  c2.out_dir = alt.string();
  json m2 = run(c2);
  for (const json& f : m2.at("results"))
    CHECK(slurp(fs::path(base.out_dir) / f.get<std::string>()) ==
          slurp(alt / f.get<std::string>()));
  for (const json& f : m2.at("checkpoints"))
    CHECK(slurp(fs::path(base.out_dir) / f.get<std::string>()) ==
          slurp(alt / f.get<std::string>()));
}

// Replaces one column of the last data line with a clearly wrong number.
void tamper_field(const fs::path& p, std::size_t col) {
  std::string text = read_text_file(p.string());
  const std::size_t end = text.find_last_not_of('\n');
  const std::size_t start = text.rfind('\n', end);
  auto fields = detail::split_csv_line(text.substr(start + 1, end - start));
  fields.at(col) = "123456.5";
  std::string rebuilt;
  for (std::size_t i = 0; i < fields.size(); ++i)
    rebuilt += (i ? "," : "") + fields[i];
  write_text_file(p.string(), text.substr(0, start + 1) + rebuilt + "\n");
}

}  // namespace

TEST_CASE("config json applies protocol defaults then explicit keys") {
  json j;
  j["protocol"] = "table1";
  ExperimentConfig c = experiment_config_from_json(j);
  CHECK(c.K == 20);
  CHECK(c.generator == "all");
  CHECK(c.s_list == std::vector<int>{50, 30});
  CHECK(c.meta.head_class == HeadClass::Linear);
  CHECK(c.meta.inner_rate == 0.001);
  CHECK(c.meta.meta_iters == 150);

  j["protocol"] = "table2_padding";
  c = experiment_config_from_json(j);
  CHECK(c.s_list == std::vector<int>{80, 40});

  j["protocol"] = "ate_fixed_p";
  c = experiment_config_from_json(j);
  CHECK(c.K == 40);
  CHECK(c.generator == "neural_network");
  CHECK(c.meta.head_class == HeadClass::TanhMlp);

  j["protocol"] = "cate_fig";
  j["K"] = 7;
  j["generator"] = "variable_selection";
  c = experiment_config_from_json(j);
  CHECK(c.K == 7);
  CHECK(c.generator == "variable_selection");

  // A partial meta object overrides only its own keys; the calibrated
  // protocol base fills the rest.
  j["meta"] = json{{"meta_iters", 12}};
  c = experiment_config_from_json(j);
  CHECK(c.meta.meta_iters == 12);
  CHECK(c.meta.inner_rate == 0.001);
  CHECK(c.meta.encoder_hidden == std::vector<int>{64, 64, 64});
}

TEST_CASE("config json rejects junk") {
  CHECK_THROWS(experiment_config_from_json(json::array()));
  CHECK_THROWS(experiment_config_from_json(json::object()));  // missing protocol
  json j;
  j["protocol"] = "table1";
  j["reps"] = 5;  // not a key (the real one is design_reps)
  CHECK_THROWS(experiment_config_from_json(j));
}

TEST_CASE("config json round-trips exactly") {
  json j;
  j["protocol"] = "ate_propensity";
  j["seed"] = 99;
  j["shots"] = {10, 20, 40};
  ExperimentConfig c = experiment_config_from_json(j);
  json echo = experiment_config_to_json(c);
  ExperimentConfig c2 = experiment_config_from_json(echo);
  CHECK(experiment_config_to_json(c2).dump() == echo.dump());
}

TEST_CASE("validate rejects each bad field") {
  fs::path out = scratch_dir("validate");
  ExperimentConfig good = micro_config("table1", out);
  validate(good);

  auto bad = [&](auto&& mutate) {
    ExperimentConfig c = good;
    mutate(c);
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
  };
  bad([](ExperimentConfig& c) { c.protocol = "table3"; });
  bad([](ExperimentConfig& c) { c.out_dir = ""; });
  bad([](ExperimentConfig& c) { c.generator = "junk"; });
  bad([](ExperimentConfig& c) { c.r = c.d + 1; });
  bad([](ExperimentConfig& c) { c.design_reps = 0; });
  bad([](ExperimentConfig& c) { c.design_reps = 99; });
  bad([](ExperimentConfig& c) { c.p_a = 0.0; });
  bad([](ExperimentConfig& c) { c.p_a = 1.5; });
  bad([](ExperimentConfig& c) { c.s_list = {}; });
  bad([](ExperimentConfig& c) { c.s_list = {c.d + 1}; });
  bad([](ExperimentConfig& c) { c.threshold_mode = "exact"; });
  bad([](ExperimentConfig& c) { c.shots = {16, 8}; });
  bad([](ExperimentConfig& c) { c.shots = {8, 8}; });
  bad([](ExperimentConfig& c) { c.raw_shots = {9, 4}; });
  bad([](ExperimentConfig& c) { c.n_target = c.shots.back() - 1; });
  bad([](ExperimentConfig& c) { c.repeats = 1; });
  bad([](ExperimentConfig& c) { c.crossfit_folds = 1; });
  bad([](ExperimentConfig& c) { c.fill_mode = "extrapolate"; });
  bad([](ExperimentConfig& c) { c.task_kind = "cubic"; });
  bad([](ExperimentConfig& c) { c.theory_p_a = 1.0; });
  bad([](ExperimentConfig& c) { c.curve_dim_min = 0; });
  bad([](ExperimentConfig& c) { c.meta.batch_tasks = 0; });
  bad([](ExperimentConfig& c) {
    c.protocol = "cate_fig";
    c.generator = "all";
  });
}

TEST_CASE("generator tokens round-trip with aliases") {
  for (RepKind k : {RepKind::FullVariables, RepKind::VariableSelection,
                    RepKind::LinearCombination, RepKind::NeuralNetwork})
    CHECK(rep_kind_from_name(rep_kind_name(k)) == k);
  CHECK(rep_kind_from_name("full") == RepKind::FullVariables);
  CHECK(rep_kind_from_name("nn") == RepKind::NeuralNetwork);
  CHECK_THROWS(rep_kind_from_name("Full Variables"));
}

TEST_CASE("identity network passes covariates through untouched") {
  MlpParams id = detail::make_identity_mlp(5);
  Rng rng(77);
  Matrix x(9, 5);
  for (double& v : x.a) v = rng.uniform(-3.0, 3.0);
  Matrix y = forward_batch(id, x);
  REQUIRE(y.rows == x.rows);
  REQUIRE(y.cols == x.cols);
  CHECK(y.a == x.a);
}

TEST_CASE("feature subsets and column restriction") {
  Rng rng(5);
  auto feats = detail::draw_feature_subset(20, 7, rng.derive("f"));
  REQUIRE(feats.size() == 7);
  for (std::size_t i = 0; i + 1 < feats.size(); ++i) CHECK(feats[i] < feats[i + 1]);
  for (int f : feats) CHECK((f >= 0 && f < 20));

  GroundTruthRep rep = gen_representation(RepKind::LinearCombination, 20, 3,
                                          rng.derive("rep"));
  GeneratedTask g = gen_task(rep, fixed_propensity(0.5), 12, rng.derive("t"));
  Task cut = detail::restrict_columns(g.task, feats);
  CHECK(cut.d_k == 7);
  CHECK(cut.feature_ids == feats);
  REQUIRE(cut.samples.size() == g.task.samples.size());
  for (std::size_t i = 0; i < cut.samples.size(); ++i) {
    CHECK(cut.samples[i].y == g.task.samples[i].y);
    CHECK(cut.samples[i].y1 == g.task.samples[i].y1);
    CHECK(cut.samples[i].i == g.task.samples[i].i);
    for (std::size_t j = 0; j < feats.size(); ++j)
      CHECK(cut.samples[i].x[j] ==
            g.task.samples[i].x[static_cast<std::size_t>(feats[j])]);
  }
}

TEST_CASE("summary groups rows in order with exact statistics") {
  std::vector<AteResultRow> rows;
  rows.push_back({"p", "rep", 10, 0, 1.0, 0.0, 1.0, 1});
  rows.push_back({"p", "raw", 10, 0, 2.0, 0.0, 4.0, 1});
  rows.push_back({"p", "rep", 10, 1, 3.0, 0.0, 9.0, 1});
  rows.push_back({"p", "raw", 10, 1, 0.0, 0.0, 0.0, 1});
  auto s = detail::summarize_rows(rows);
  REQUIRE(s.size() == 2);
  CHECK(s[0].method == "rep");
  CHECK(s[0].mse == 5.0);  // mean(1, 9)
  CHECK(s[1].method == "raw");
  CHECK(s[1].mse == 2.0);  // mean(4, 0)
  // Mirror the implementation's algebra exactly: var/(n) under the sqrt.
  const double var_rep = ((1.0 - 5.0) * (1.0 - 5.0) + (9.0 - 5.0) * (9.0 - 5.0)) / 1.0;
  CHECK(s[0].ci95_halfwidth == 1.96 * std::sqrt(var_rep / 2.0));

  rows.resize(1);
  CHECK_THROWS(detail::summarize_rows(rows));  // one repeat in a group
}

TEST_CASE("theory ratio protocol writes and verifies") {
  fs::path out = scratch_dir("theory");
  ExperimentConfig c = micro_config("theory_ratio", out);
  c.theory_d = 500;
  c.theory_s = 20;
  c.theory_p_a = 0.001;
  json manifest = run(c);

  CHECK(manifest.at("format") == "covrep-run-manifest");
  CHECK(manifest.at("protocol") == "theory_ratio");
  CHECK(manifest.at("results") == json({"theory_ratio.csv"}));
  CHECK(manifest.at("checkpoints").empty());
  CHECK(manifest.at("wall_time_sec").get<double>() >= 0.0);
  CHECK(fs::exists(out / "manifest.json"));

  std::istringstream is(slurp(out / "theory_ratio.csv"));
  detail::expect_header(is, kTheoryCsvHeader);
  std::string line;
  REQUIRE(std::getline(is, line));
  auto f = detail::split_csv_line(line);
  REQUIRE(f.size() == 4);
  CHECK(parse_double(f[3]) == theoretical_ratio(500, 20, 0.001));

  CHECK_NOTHROW(verify_run(out.string()));
  check_deterministic(c, "theory");

  tamper_field(out / "theory_ratio.csv", 3);
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("reduction curve protocol writes and verifies") {
  fs::path out = scratch_dir("curves");
  ExperimentConfig c = micro_config("rem_curves", out);
  c.curve_dim_min = 2;
  c.curve_dim_max = 10;
  json manifest = run(c);
  CHECK(manifest.at("results") == json({"reduction_curve.csv"}));

  std::istringstream is(slurp(out / "reduction_curve.csv"));
  auto stored = read_curve_csv(is);
  REQUIRE(stored.size() == 9);
  std::vector<int> dims;
  for (const auto& entry : stored) dims.push_back(entry.first);
  CHECK(stored == percent_variance_reduction(c.curve_r2, c.curve_p_a, dims));

  CHECK_NOTHROW(verify_run(out.string()));
  tamper_field(out / "reduction_curve.csv", 1);
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("variance table protocol end to end") {
  fs::path out = scratch_dir("table1");
  ExperimentConfig c = micro_config("table1", out);
  json manifest = run(c);

  CHECK(manifest.at("results") ==
        json({"design_results.csv", "design_table.csv"}));
  // meta_iters=2, checkpoint_every=1, one trained cell (1 generator x 1 seed x 1 s).
  REQUIRE(manifest.at("checkpoints").size() == 2);
  for (const json& f : manifest.at("checkpoints")) {
    CHECK(fs::exists(out / f.get<std::string>()));
    MetaModelDoc doc = load_meta_model((out / f.get<std::string>()).string());
    CHECK(doc.model.encoder.layer_dims.front() == c.d);
    CHECK(doc.model.encoder.layer_dims.back() == 3);
  }

  std::istringstream is(slurp(out / "design_results.csv"));
  auto rows = read_design_csv(is);
  REQUIRE(rows.size() == 2);  // raw + s=3
  CHECK(rows[0].covariates_mode == "raw");
  CHECK(rows[0].s == 0);
  CHECK(rows[1].covariates_mode == "representation");
  CHECK(rows[1].s == 3);
  for (const auto& r : rows) {
    CHECK(r.generator == "linear_combination");
    CHECK(r.reps == 100);
    CHECK(r.seed == 3);
    CHECK(std::isfinite(r.ratio));
    CHECK(r.ratio > 0.0);
    CHECK(r.ratio == r.var_rem / r.var_cr);
    CHECK(r.accept_rate > 0.0);
  }

  // The aggregate table restates the per-seed rows (n_seeds=1: equal values).
  std::string table = slurp(out / "design_table.csv");
  std::istringstream ts(table);
  std::string header, rowline;
  REQUIRE(std::getline(ts, header));
  CHECK(header == "generator,original,s3");
  REQUIRE(std::getline(ts, rowline));
  auto cells = detail::split_csv_line(rowline);
  REQUIRE(cells.size() == 3);
  CHECK(cells[0] == "linear_combination");
  CHECK(parse_double(cells[1]) == rows[0].ratio);
  CHECK(parse_double(cells[2]) == rows[1].ratio);

  CHECK_NOTHROW(verify_run(out.string()));
  check_deterministic(c, "table1");

  tamper_field(out / "design_table.csv", 1);
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("padded table protocol pads to the catalogue dimension") {
  fs::path out = scratch_dir("table2");
  ExperimentConfig c = micro_config("table2_padding", out);
  c.d_max = 10;
  c.d_k_min = 4;
  c.d_k_max = 7;
  c.s_list = {3};
  json manifest = run(c);
  (void)manifest;

  std::istringstream is(slurp(out / "design_results.csv"));
  auto rows = read_design_csv(is);
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.ratio));
    CHECK(r.ratio > 0.0);
  }
  // Checkpointed encoder input equals the catalogue dimension, not d.
  REQUIRE(manifest.at("checkpoints").size() == 2);
  MetaModelDoc doc = load_meta_model(
      (out / manifest.at("checkpoints")[0].get<std::string>()).string());
  CHECK(doc.model.encoder.layer_dims.front() == 10);

  CHECK_NOTHROW(verify_run(out.string()));

  // A missing checkpoint listed in the manifest is a verification failure.
  fs::remove(out / manifest.at("checkpoints")[0].get<std::string>());
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("effect curve protocol end to end") {
  fs::path out = scratch_dir("cate");
  ExperimentConfig c = micro_config("cate_fig", out);
  c.meta.head_class = HeadClass::Linear;
  json manifest = run(c);
  CHECK(manifest.at("results") == json({"estimates.csv", "summary.csv"}));

  std::istringstream is(slurp(out / "estimates.csv"));
  auto rows = read_ate_csv(is);
  // repeats=2 x (2 rep shots + 1 raw shot) = 6 rows.
  REQUIRE(rows.size() == 6);
  int rep_rows = 0, raw_rows = 0;
  for (const auto& r : rows) {
    CHECK(r.protocol == "cate_fig");
    CHECK(r.true_value == 0.0);
    CHECK(r.sq_error == r.estimate);
    CHECK(r.sq_error >= 0.0);
    CHECK(std::isfinite(r.sq_error));
    (r.method == "rep" ? rep_rows : raw_rows)++;
  }
  CHECK(rep_rows == 4);
  CHECK(raw_rows == 2);

  std::istringstream ss(slurp(out / "summary.csv"));
  auto sums = read_ate_summary_csv(ss);
  REQUIRE(sums.size() == 3);  // rep/8, rep/16, raw/8
  for (const auto& s : sums) {
    double acc = 0.0;
    int cnt = 0;
    for (const auto& r : rows)
      if (r.method == s.method && r.shots == s.shots) {
        acc += r.sq_error;
        cnt++;
      }
    CHECK(cnt == 2);
    CHECK(s.mse == acc / cnt);
  }

  CHECK_NOTHROW(verify_run(out.string()));
  check_deterministic(c, "cate");

  tamper_field(out / "summary.csv", 3);
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("average effect protocol with fixed probabilities") {
  fs::path out = scratch_dir("ate_p");
  ExperimentConfig c = micro_config("ate_fixed_p", out);
  c.K = 3;
  c.shots = {40};
  c.raw_shots = {};
  c.n_target = 40;
  json manifest = run(c);
  (void)manifest;

  std::istringstream is(slurp(out / "estimates.csv"));
  auto rows = read_ate_csv(is);
  REQUIRE(rows.size() == 4);  // 1 shot x {rep, raw} x 2 repeats
  for (const auto& r : rows) {
    CHECK(r.protocol == "ate_fixed_p");
    const double e = r.estimate - r.true_value;
    CHECK(r.sq_error == e * e);
    CHECK(std::isfinite(r.estimate));
  }
  // Same repeat shares the same oracle effect across methods.
  for (const auto& a : rows)
    for (const auto& b : rows)
      if (a.repeat == b.repeat) CHECK(a.true_value == b.true_value);

  CHECK_NOTHROW(verify_run(out.string()));
  check_deterministic(c, "ate_p");

  tamper_field(out / "estimates.csv", 6);
  CHECK_THROWS(verify_run(out.string()));
}

TEST_CASE("average effect protocol with learned propensities") {
  fs::path out = scratch_dir("ate_prop");
  ExperimentConfig c = micro_config("ate_propensity", out);
  c.K = 2;
  c.shots = {40};
  c.raw_shots = {};
  c.n_target = 40;
  json manifest = run(c);

  // Outcome and propensity meta-models both checkpoint (2 iters each).
  REQUIRE(manifest.at("checkpoints").size() == 4);

  std::istringstream is(slurp(out / "estimates.csv"));
  auto rows = read_ate_csv(is);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) CHECK(std::isfinite(r.estimate));

  CHECK_NOTHROW(verify_run(out.string()));
  check_deterministic(c, "ate_prop");
}

TEST_CASE("run validates before touching the filesystem") {
  fs::path out = scratch_dir("novalidate");
  fs::remove_all(out);
  ExperimentConfig c = micro_config("table1", fs::path(out));
  c.design_reps = 5;
  CHECK_THROWS_AS(run(c), std::invalid_argument);
  CHECK_FALSE(fs::exists(out));
}
