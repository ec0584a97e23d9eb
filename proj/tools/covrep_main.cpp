// Command-line front end: `covrep run <protocol>` executes one experiment
// protocol into an output directory, `covrep gen` emits a task-set directory,
// `covrep train` fits a meta-model on an existing task set, and
// `covrep verify` re-derives every aggregate in a finished run directory.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "covrep/harness.hpp"

namespace {

std::uint64_t env_seed_or(std::uint64_t fallback) {
  const char* s = std::getenv("COVREP_SEED");
  if (s == nullptr || *s == '\0') return fallback;
  return covrep::parse_uint(s);
}

struct RunArgs {
  std::string protocol;
  std::string config_file;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool has_seed = false;
  bool has_out = false;
  bool verify = false;
  // Convenience overrides (each applied only when given on the command line).
  int d = 0;
  bool has_d = false;
  int s = 0;
  bool has_s = false;
  double p = 0.0;
  bool has_p = false;
  int reps = 0;
  bool has_reps = false;
  std::string generator;
};

covrep::ExperimentConfig build_run_config(const RunArgs& a) {
  covrep::json j = covrep::json::object();
  bool file_has_seed = false;
  if (!a.config_file.empty()) {
    j = covrep::json::parse(covrep::read_text_file(a.config_file));
    if (!j.is_object())
      throw std::runtime_error("config file must hold a JSON object");
    file_has_seed = j.contains("seed");
  }
  j["protocol"] = a.protocol;
  covrep::ExperimentConfig c = covrep::experiment_config_from_json(j);

  if (a.has_seed) c.seed = a.seed;
  else if (!file_has_seed) c.seed = env_seed_or(c.seed);
  if (a.has_out) c.out_dir = a.out_dir;
  if (!a.generator.empty()) c.generator = a.generator;
  if (a.has_reps) c.design_reps = a.reps;
  if (a.protocol == "theory_ratio") {
    if (a.has_d) c.theory_d = a.d;
    if (a.has_s) c.theory_s = a.s;
    if (a.has_p) c.theory_p_a = a.p;
  } else {
    if (a.has_d) c.d = a.d;
    if (a.has_s) c.s_list = {a.s};
    if (a.has_p) c.p_a = a.p;
  }
  covrep::validate(c);
  return c;
}

int cmd_run(const RunArgs& a) {
  covrep::ExperimentConfig cfg;
  try {
    cfg = build_run_config(a);
  } catch (const std::exception& e) {
    std::cerr << "covrep run: " << e.what() << '\n';
    return 2;
  }
  try {
    covrep::json manifest = covrep::run(cfg);
    if (cfg.protocol == "theory_ratio")
      std::cout << "ratio = "
                << covrep::format_double(covrep::theoretical_ratio(
                       cfg.theory_d, cfg.theory_s, cfg.theory_p_a))
                << '\n';
    std::cout << cfg.protocol << ": wrote";
    for (const covrep::json& f : manifest.at("results"))
      std::cout << ' ' << f.get<std::string>();
    std::cout << " in " << cfg.out_dir << " ("
              << manifest.at("wall_time_sec").get<double>() << " s)\n";
    if (a.verify) {
      covrep::verify_run(cfg.out_dir);
      std::cout << "verify: all aggregates match the raw rows\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "covrep run: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

struct GenArgs {
  std::string out_dir;
  std::string generator = "neural_network";
  std::string kind = "logistic";
  int d = 300;
  int r = 50;
  int K = 20;
  int n = 1000;
  double noise = 0.1;
  double p = 0.5;
  std::uint64_t seed = 0;
  bool has_seed = false;
};

int cmd_gen(const GenArgs& a) {
  using namespace covrep;
  RepKind kind;
  TaskFunctionKind fkind;
  try {
    kind = rep_kind_from_name(a.generator);
    if (a.kind != "logistic" && a.kind != "linear")
      throw std::runtime_error("--kind must be 'logistic' or 'linear'");
    fkind = a.kind == "linear" ? TaskFunctionKind::Linear : TaskFunctionKind::Logistic;
    if (a.d < 1 || a.r < 1 || a.r > a.d || a.K < 1 || a.n < 2)
      throw std::runtime_error("need d >= 1, 1 <= r <= d, K >= 1, n >= 2");
    if (!(a.p > 0.0 && a.p < 1.0))
      throw std::runtime_error("--p must lie in (0, 1)");
  } catch (const std::exception& e) {
    std::cerr << "covrep gen: " << e.what() << '\n';
    return 2;
  }
  try {
    const std::uint64_t seed = a.has_seed ? a.seed : env_seed_or(0);
    Rng root(seed);
    GroundTruthRep truth = gen_representation(kind, a.d, a.r, root.derive("truth"));
    TaskSet set;
    set.d_max = a.d;
    for (int k = 0; k < a.K; ++k) {
      auto g = gen_task(truth, fixed_propensity(a.p), a.n,
                        root.derive("task/" + std::to_string(k)), fkind, a.noise);
      g.task.id = k;
      set.tasks.push_back(std::move(g.task));
    }
    auto g = gen_task(truth, fixed_propensity(a.p), a.n, root.derive("target"),
                      fkind, a.noise);
    g.task.id = a.K;
    set.target = std::move(g.task);
    save_taskset(a.out_dir, set, rep_kind_name(kind), seed);
    std::cout << "gen: wrote " << a.K << " tasks + target in " << a.out_dir << '\n';
  } catch (const std::exception& e) {
    std::cerr << "covrep gen: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

struct TrainArgs {
  std::string tasks_dir;
  std::string out_file;
  std::string config_file;
  std::uint64_t seed = 0;
  bool has_seed = false;
  int s = 0;
  bool has_s = false;
  int iters = -1;
};

int cmd_train(const TrainArgs& a) {
  using namespace covrep;
  MetaConfig cfg = protocol_meta_defaults("cate_fig");
  try {
    if (!a.config_file.empty()) {
      json j = json::parse(read_text_file(a.config_file));
      cfg = meta_config_from_json(j, cfg);
    }
    if (a.has_s) cfg.s = a.s;
    if (a.iters >= 0) cfg.meta_iters = a.iters;
    if (cfg.s < 1 || cfg.meta_iters < 0 || cfg.batch_tasks < 1 || cfg.inner_shots < 1)
      throw std::runtime_error("invalid training configuration");
  } catch (const std::exception& e) {
    std::cerr << "covrep train: " << e.what() << '\n';
    return 2;
  }
  try {
    const std::uint64_t seed = a.has_seed ? a.seed : env_seed_or(0);
    TaskSet set = load_taskset(a.tasks_dir);
    MetaModel model = maml_train(split_tasks(set.tasks), set.d_max, cfg,
                                 Rng(seed).derive("train"));
    save_meta_model(a.out_file, model, cfg, seed);
    std::cout << "train: wrote " << a.out_file << " (input dim " << set.d_max
              << ", representation dim " << cfg.s << ")\n";
  } catch (const std::exception& e) {
    std::cerr << "covrep train: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shared covariate representation toolkit"};
  app.require_subcommand(1);

  RunArgs run_args;
  CLI::App* run_cmd = app.add_subcommand("run", "execute one experiment protocol");
  run_cmd->add_option("protocol", run_args.protocol, "one of: table1, table2_padding, "
                      "cate_fig, ate_fixed_p, ate_propensity, rem_curves, theory_ratio")
      ->required();
  run_cmd->add_option("--config", run_args.config_file, "JSON config file");
  CLI::Option* o_seed = run_cmd->add_option("--seed", run_args.seed, "root seed");
  CLI::Option* o_out = run_cmd->add_option("--out", run_args.out_dir, "output directory");
  run_cmd->add_flag("--verify", run_args.verify, "re-derive aggregates after the run");
  CLI::Option* o_d = run_cmd->add_option("--d", run_args.d, "covariate dimension");
  CLI::Option* o_s = run_cmd->add_option("--s", run_args.s, "representation dimension");
  CLI::Option* o_p = run_cmd->add_option("--p", run_args.p,
                                         "acceptance probability (theory/design)");
  CLI::Option* o_reps = run_cmd->add_option("--reps", run_args.reps,
                                            "design replications per cell");
  run_cmd->add_option("--generator", run_args.generator,
                      "full_variables | variable_selection | linear_combination | "
                      "neural_network | all");

  GenArgs gen_args;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a task-set directory");
  gen_cmd->add_option("--out", gen_args.out_dir, "output directory")->required();
  gen_cmd->add_option("--generator", gen_args.generator, "representation kind");
  gen_cmd->add_option("--kind", gen_args.kind, "outcome function: logistic | linear");
  gen_cmd->add_option("--d", gen_args.d, "covariate dimension");
  gen_cmd->add_option("--r", gen_args.r, "representation dimension");
  gen_cmd->add_option("--K", gen_args.K, "number of historical tasks");
  gen_cmd->add_option("--n", gen_args.n, "samples per task");
  gen_cmd->add_option("--noise", gen_args.noise, "outcome noise sd");
  gen_cmd->add_option("--p", gen_args.p, "treatment probability");
  CLI::Option* g_seed = gen_cmd->add_option("--seed", gen_args.seed, "root seed");

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "fit a meta-model on a task set");
  train_cmd->add_option("--tasks", train_args.tasks_dir, "task-set directory")->required();
  train_cmd->add_option("--out", train_args.out_file, "model JSON path")->required();
  train_cmd->add_option("--config", train_args.config_file, "training config JSON");
  CLI::Option* t_seed = train_cmd->add_option("--seed", train_args.seed, "root seed");
  CLI::Option* t_s = train_cmd->add_option("--s", train_args.s, "representation dimension");
  train_cmd->add_option("--iters", train_args.iters, "outer iterations");

  std::string verify_dir;
  CLI::App* verify_cmd =
      app.add_subcommand("verify", "re-derive aggregates in a run directory");
  verify_cmd->add_option("dir", verify_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (run_cmd->parsed()) {
    run_args.has_seed = o_seed->count() > 0;
    run_args.has_out = o_out->count() > 0;
    run_args.has_d = o_d->count() > 0;
    run_args.has_s = o_s->count() > 0;
    run_args.has_p = o_p->count() > 0;
    run_args.has_reps = o_reps->count() > 0;
    return cmd_run(run_args);
  }
  if (gen_cmd->parsed()) {
    gen_args.has_seed = g_seed->count() > 0;
    return cmd_gen(gen_args);
  }
  if (train_cmd->parsed()) {
    train_args.has_seed = t_seed->count() > 0;
    train_args.has_s = t_s->count() > 0;
    return cmd_train(train_args);
  }
  try {
    covrep::verify_run(verify_dir);
    std::cout << "verify: all aggregates match the raw rows\n";
  } catch (const std::exception& e) {
    std::cerr << "covrep verify: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
