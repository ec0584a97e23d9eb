#pragma once

// Persistence layer: model documents as JSON, task data and experiment
// results as CSV. Every floating-point value round-trips exactly — CSV fields
// use the shortest decimal form that parses back to the same bits, and the
// JSON library's number output has the same guarantee.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "json.hpp"

#include "covrep/data.hpp"
#include "covrep/metalearn.hpp"
#include "covrep/mlp.hpp"

namespace covrep {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Exact-round-trip numbers and small CSV plumbing
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc())
    throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("parse_double: bad number '" + std::string(s) + "'");
  return v;
}

inline long long parse_int(std::string_view s) {
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("parse_int: bad integer '" + std::string(s) + "'");
  return v;
}

inline std::uint64_t parse_uint(std::string_view s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("parse_uint: bad integer '" + std::string(s) + "'");
  return v;
}

namespace detail {

// CSV fields carry numbers and short identifier tokens only, so the format
// needs no quoting; writing enforces that.
inline void check_csv_token(const std::string& s) {
  if (s.empty()) throw std::invalid_argument("csv: empty field");
  for (char c : s)
    if (c == ',' || c == '\n' || c == '\r')
      throw std::invalid_argument("csv: field '" + s + "' needs quoting, which this format does not use");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string expect_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error(std::string("csv: missing ") + what);
  return line;
}

inline void expect_header(std::istream& is, const std::string& header) {
  std::string line = expect_line(is, "header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header)
    throw std::runtime_error("csv: header mismatch, expected '" + header + "' got '" + line + "'");
}

}  // namespace detail

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Enum tokens
// ---------------------------------------------------------------------------

inline std::string act_name(Act a) {
  switch (a) {
    case Act::ReLU: return "relu";
    case Act::Tanh: return "tanh";
    case Act::Identity: return "identity";
    case Act::Sigmoid: return "sigmoid";
  }
  throw std::invalid_argument("act_name: unknown activation");
}

inline Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::ReLU;
  if (s == "tanh") return Act::Tanh;
  if (s == "identity") return Act::Identity;
  if (s == "sigmoid") return Act::Sigmoid;
  throw std::runtime_error("unknown activation '" + s + "'");
}

inline std::string head_class_name(HeadClass h) {
  return h == HeadClass::Linear ? "linear" : "tanh_mlp";
}

inline HeadClass head_class_from_name(const std::string& s) {
  if (s == "linear") return HeadClass::Linear;
  if (s == "tanh_mlp") return HeadClass::TanhMlp;
  throw std::runtime_error("unknown head class '" + s + "'");
}

// ---------------------------------------------------------------------------
// Network parameters and meta-model documents (JSON)
// ---------------------------------------------------------------------------

inline json mlp_to_json(const MlpParams& p) {
  json j;
  j["layer_dims"] = p.layer_dims;
  j["hidden_act"] = act_name(p.hidden_act);
  j["output_act"] = act_name(p.output_act);
  j["params"] = flatten(p);  // weights row-major, layer by layer, then biases
  return j;
}

inline MlpParams mlp_from_json(const json& j) {
  MlpParams p;
  p.layer_dims = j.at("layer_dims").get<std::vector<int>>();
  if (p.layer_dims.size() < 2)
    throw std::runtime_error("network document: need at least two layer dims");
  for (int d : p.layer_dims)
    if (d < 1) throw std::runtime_error("network document: layer dims must be positive");
  p.hidden_act = act_from_name(j.at("hidden_act").get<std::string>());
  p.output_act = act_from_name(j.at("output_act").get<std::string>());
  for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
    p.weights.emplace_back(p.layer_dims[l + 1], p.layer_dims[l]);
    p.biases.emplace_back(static_cast<std::size_t>(p.layer_dims[l + 1]), 0.0);
  }
  const auto flat = j.at("params").get<std::vector<double>>();
  unflatten(p, flat);
  return p;
}

inline json meta_config_to_json(const MetaConfig& c) {
  json j;
  j["s"] = c.s;
  j["inner_rate"] = c.inner_rate;
  j["outer_rate_head"] = c.outer_rate_head;
  j["outer_rate_encoder"] = c.outer_rate_encoder;
  j["batch_tasks"] = c.batch_tasks;
  j["inner_shots"] = c.inner_shots;
  j["meta_iters"] = c.meta_iters;
  j["head_class"] = head_class_name(c.head_class);
  j["inner_steps_adapt"] = c.inner_steps_adapt;
  j["encoder_hidden"] = c.encoder_hidden;
  j["head_hidden"] = c.head_hidden;
  j["second_order_fd"] = c.second_order_fd;
  j["divergence_cap"] = c.divergence_cap;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

// Reads a config object; absent keys keep the values of `c` (the defaults,
// unless a caller supplies its own baseline), unknown keys are rejected so
// typos never pass silently.
inline MetaConfig meta_config_from_json(const json& j, MetaConfig c = MetaConfig{}) {
  if (!j.is_object()) throw std::runtime_error("meta config: expected a JSON object");
  static const char* known[] = {
      "s", "inner_rate", "outer_rate_head", "outer_rate_encoder", "batch_tasks",
      "inner_shots", "meta_iters", "head_class", "inner_steps_adapt",
      "encoder_hidden", "head_hidden", "second_order_fd", "divergence_cap",
      "checkpoint_every"};
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw std::runtime_error("meta config: unknown key '" + item.key() + "'");
  }
  if (j.contains("s")) c.s = j.at("s").get<int>();
  if (j.contains("inner_rate")) c.inner_rate = j.at("inner_rate").get<double>();
  if (j.contains("outer_rate_head")) c.outer_rate_head = j.at("outer_rate_head").get<double>();
  if (j.contains("outer_rate_encoder"))
    c.outer_rate_encoder = j.at("outer_rate_encoder").get<double>();
  if (j.contains("batch_tasks")) c.batch_tasks = j.at("batch_tasks").get<int>();
  if (j.contains("inner_shots")) c.inner_shots = j.at("inner_shots").get<int>();
  if (j.contains("meta_iters")) c.meta_iters = j.at("meta_iters").get<int>();
  if (j.contains("head_class"))
    c.head_class = head_class_from_name(j.at("head_class").get<std::string>());
  if (j.contains("inner_steps_adapt"))
    c.inner_steps_adapt = j.at("inner_steps_adapt").get<int>();
  if (j.contains("encoder_hidden"))
    c.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
  if (j.contains("head_hidden")) c.head_hidden = j.at("head_hidden").get<std::vector<int>>();
  if (j.contains("second_order_fd")) c.second_order_fd = j.at("second_order_fd").get<bool>();
  if (j.contains("divergence_cap")) c.divergence_cap = j.at("divergence_cap").get<double>();
  if (j.contains("checkpoint_every"))
    c.checkpoint_every = j.at("checkpoint_every").get<int>();
  return c;
}

struct MetaModelDoc {
  MetaModel model;
  MetaConfig config;
  std::uint64_t seed = 0;
};

inline json meta_model_to_json(const MetaModel& m, const MetaConfig& c,
                               std::uint64_t seed) {
  json j;
  j["format"] = "covrep-meta-model";
  j["version"] = 1;
  j["seed"] = seed;
  j["config"] = meta_config_to_json(c);
  j["encoder"] = mlp_to_json(m.encoder);
  j["head"] = mlp_to_json(m.head);
  return j;
}

inline MetaModelDoc meta_model_from_json(const json& j) {
  if (j.value("format", std::string()) != "covrep-meta-model")
    throw std::runtime_error("model document: unrecognized format tag");
  MetaModelDoc doc;
  doc.seed = j.at("seed").get<std::uint64_t>();
  doc.config = meta_config_from_json(j.at("config"));
  doc.model.encoder = mlp_from_json(j.at("encoder"));
  doc.model.head = mlp_from_json(j.at("head"));
  return doc;
}

inline void save_meta_model(const std::string& path, const MetaModel& m,
                            const MetaConfig& c, std::uint64_t seed) {
  write_text_file(path, meta_model_to_json(m, c, seed).dump(2) + "\n");
}

inline MetaModelDoc load_meta_model(const std::string& path) {
  return meta_model_from_json(json::parse(read_text_file(path)));
}

// ---------------------------------------------------------------------------
// Task CSV
// ---------------------------------------------------------------------------

// Columns: x0..x{d-1},treat,y, then y1,y0 when every sample carries potential
// outcomes, then m0..m{d-1} when the task was padded (mask columns).
inline void write_task_csv(std::ostream& os, const Task& t) {
  const int d = t.d_k;
  if (d < 1) throw std::invalid_argument("task csv: d must be >= 1");
  bool po = !t.samples.empty();
  bool masked = false;
  for (const Sample& s : t.samples) {
    po = po && s.has_potential_outcomes();
    masked = masked || !s.mask.empty();
  }
  for (const Sample& s : t.samples) {
    if (static_cast<int>(s.x.size()) != d)
      throw std::invalid_argument("task csv: ragged covariates");
    if (masked && static_cast<int>(s.mask.size()) != d)
      throw std::invalid_argument("task csv: mask length mismatch");
  }

  for (int j = 0; j < d; ++j) os << (j ? "," : "") << 'x' << j;
  os << ",treat,y";
  if (po) os << ",y1,y0";
  if (masked)
    for (int j = 0; j < d; ++j) os << ",m" << j;
  os << '\n';

  for (const Sample& s : t.samples) {
    for (int j = 0; j < d; ++j)
      os << (j ? "," : "") << format_double(s.x[static_cast<std::size_t>(j)]);
    os << ',' << s.i << ',' << format_double(s.y);
    if (po) os << ',' << format_double(s.y1) << ',' << format_double(s.y0);
    if (masked)
      for (int j = 0; j < d; ++j) os << ',' << format_double(s.mask[static_cast<std::size_t>(j)]);
    os << '\n';
  }
  if (!os) throw std::runtime_error("task csv: stream write failed");
}

inline Task read_task_csv(std::istream& is) {
  std::string header = detail::expect_line(is, "task csv header");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const std::vector<std::string> cols = detail::split_csv_line(header);

  int d = 0;
  while (d < static_cast<int>(cols.size()) && cols[static_cast<std::size_t>(d)] == "x" + std::to_string(d))
    ++d;
  if (d == 0) throw std::runtime_error("task csv: header must start with x0");
  std::size_t at = static_cast<std::size_t>(d);
  auto need = [&](const char* name) {
    if (at >= cols.size() || cols[at] != name)
      throw std::runtime_error(std::string("task csv: expected column '") + name + "'");
    ++at;
  };
  need("treat");
  need("y");
  bool po = at < cols.size() && cols[at] == "y1";
  if (po) {
    need("y1");
    need("y0");
  }
  bool masked = at < cols.size();
  if (masked) {
    for (int j = 0; j < d; ++j) need(("m" + std::to_string(j)).c_str());
  }
  if (at != cols.size()) throw std::runtime_error("task csv: trailing columns in header");

  Task t;
  t.d_k = d;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() != cols.size())
      throw std::runtime_error("task csv: row has " + std::to_string(f.size()) +
                               " fields, header has " + std::to_string(cols.size()));
    Sample s;
    s.x.resize(static_cast<std::size_t>(d));
    std::size_t k = 0;
    for (int j = 0; j < d; ++j) s.x[static_cast<std::size_t>(j)] = parse_double(f[k++]);
    const long long treat = parse_int(f[k++]);
    if (treat != 0 && treat != 1)
      throw std::runtime_error("task csv: treat must be 0 or 1");
    s.i = static_cast<int>(treat);
    s.y = parse_double(f[k++]);
    if (po) {
      s.y1 = parse_double(f[k++]);
      s.y0 = parse_double(f[k++]);
    }
    if (masked) {
      s.mask.resize(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) s.mask[static_cast<std::size_t>(j)] = parse_double(f[k++]);
    }
    t.samples.push_back(std::move(s));
  }
  return t;
}

inline void save_task_csv(const std::string& path, const Task& t) {
  std::ostringstream ss;
  write_task_csv(ss, t);
  write_text_file(path, ss.str());
}

inline Task load_task_csv(const std::string& path) {
  std::istringstream ss(read_text_file(path));
  return read_task_csv(ss);
}

// ---------------------------------------------------------------------------
// Task-set directory with JSON manifest
// ---------------------------------------------------------------------------

inline void save_taskset(const std::string& dir, const TaskSet& set,
                         const std::string& generator, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "covrep-taskset";
  manifest["version"] = 1;
  manifest["d_max"] = set.d_max;
  manifest["generator"] = generator;
  manifest["seed"] = seed;

  json files = json::array();
  char name[32];
  for (std::size_t k = 0; k < set.tasks.size(); ++k) {
    std::snprintf(name, sizeof(name), "task_%03zu.csv", k);
    save_task_csv(dir + "/" + name, set.tasks[k]);
    json e;
    e["file"] = name;
    e["id"] = set.tasks[k].id;
    e["d_k"] = set.tasks[k].d_k;
    e["feature_ids"] = set.tasks[k].feature_ids;
    files.push_back(e);
  }
  manifest["tasks"] = files;

  save_task_csv(dir + "/target.csv", set.target);
  json te;
  te["file"] = "target.csv";
  te["id"] = set.target.id;
  te["d_k"] = set.target.d_k;
  te["feature_ids"] = set.target.feature_ids;
  manifest["target"] = te;

  write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

inline TaskSet load_taskset(const std::string& dir) {
  const json manifest = json::parse(read_text_file(dir + "/manifest.json"));
  if (manifest.value("format", std::string()) != "covrep-taskset")
    throw std::runtime_error("task-set manifest: unrecognized format tag");
  TaskSet set;
  set.d_max = manifest.at("d_max").get<int>();
  auto load_entry = [&](const json& e) {
    Task t = load_task_csv(dir + "/" + e.at("file").get<std::string>());
    t.id = e.at("id").get<int>();
    t.feature_ids = e.at("feature_ids").get<std::vector<int>>();
    if (t.d_k != e.at("d_k").get<int>())
      throw std::runtime_error("task-set manifest: d_k does not match the CSV");
    return t;
  };
  for (const json& e : manifest.at("tasks")) set.tasks.push_back(load_entry(e));
  set.target = load_entry(manifest.at("target"));
  return set;
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

struct DesignResultRow {
  std::string generator;
  std::string covariates_mode;  // "raw" or "representation"
  int s = 0;                    // representation width; 0 for raw rows
  double p_a = 0.0;
  int reps = 0;
  double var_rem = 0.0;
  double var_cr = 0.0;
  double ratio = 0.0;
  double accept_rate = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kDesignCsvHeader =
    "generator,covariates_mode,s,p_a,reps,var_rem,var_cr,ratio,accept_rate,seed";

inline void write_design_csv(std::ostream& os, const std::vector<DesignResultRow>& rows) {
  os << kDesignCsvHeader << '\n';
  for (const DesignResultRow& r : rows) {
    detail::check_csv_token(r.generator);
    detail::check_csv_token(r.covariates_mode);
    os << r.generator << ',' << r.covariates_mode << ',' << r.s << ','
       << format_double(r.p_a) << ',' << r.reps << ',' << format_double(r.var_rem)
       << ',' << format_double(r.var_cr) << ',' << format_double(r.ratio) << ','
       << format_double(r.accept_rate) << ',' << r.seed << '\n';
  }
  if (!os) throw std::runtime_error("design csv: stream write failed");
}

inline std::vector<DesignResultRow> read_design_csv(std::istream& is) {
  detail::expect_header(is, kDesignCsvHeader);
  std::vector<DesignResultRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 10) throw std::runtime_error("design csv: expected 10 fields");
    DesignResultRow r;
    r.generator = f[0];
    r.covariates_mode = f[1];
    r.s = static_cast<int>(parse_int(f[2]));
    r.p_a = parse_double(f[3]);
    r.reps = static_cast<int>(parse_int(f[4]));
    r.var_rem = parse_double(f[5]);
    r.var_cr = parse_double(f[6]);
    r.ratio = parse_double(f[7]);
    r.accept_rate = parse_double(f[8]);
    r.seed = parse_uint(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline constexpr const char* kCurveCsvHeader = "dim,percent_reduction";

inline void write_curve_csv(std::ostream& os,
                            const std::vector<std::pair<int, double>>& curve) {
  os << kCurveCsvHeader << '\n';
  for (const auto& [dim, pct] : curve)
    os << dim << ',' << format_double(pct) << '\n';
  if (!os) throw std::runtime_error("curve csv: stream write failed");
}

inline std::vector<std::pair<int, double>> read_curve_csv(std::istream& is) {
  detail::expect_header(is, kCurveCsvHeader);
  std::vector<std::pair<int, double>> curve;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 2) throw std::runtime_error("curve csv: expected 2 fields");
    curve.emplace_back(static_cast<int>(parse_int(f[0])), parse_double(f[1]));
  }
  return curve;
}

struct AteResultRow {
  std::string protocol;
  std::string method;  // e.g. "rep" or "raw"
  int shots = 0;
  int repeat = 0;
  double estimate = 0.0;
  double true_value = 0.0;
  double sq_error = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kAteCsvHeader =
    "protocol,method,shots,repeat,estimate,true_value,sq_error,seed";

inline void write_ate_csv(std::ostream& os, const std::vector<AteResultRow>& rows) {
  os << kAteCsvHeader << '\n';
  for (const AteResultRow& r : rows) {
    detail::check_csv_token(r.protocol);
    detail::check_csv_token(r.method);
    os << r.protocol << ',' << r.method << ',' << r.shots << ',' << r.repeat << ','
       << format_double(r.estimate) << ',' << format_double(r.true_value) << ','
       << format_double(r.sq_error) << ',' << r.seed << '\n';
  }
  if (!os) throw std::runtime_error("result csv: stream write failed");
}

inline std::vector<AteResultRow> read_ate_csv(std::istream& is) {
  detail::expect_header(is, kAteCsvHeader);
  std::vector<AteResultRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw std::runtime_error("result csv: expected 8 fields");
    AteResultRow r;
    r.protocol = f[0];
    r.method = f[1];
    r.shots = static_cast<int>(parse_int(f[2]));
    r.repeat = static_cast<int>(parse_int(f[3]));
    r.estimate = parse_double(f[4]);
    r.true_value = parse_double(f[5]);
    r.sq_error = parse_double(f[6]);
    r.seed = parse_uint(f[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

struct AteSummaryRow {
  std::string protocol;
  std::string method;
  int shots = 0;
  double mse = 0.0;
  double ci95_halfwidth = 0.0;
};

inline constexpr const char* kAteSummaryCsvHeader =
    "protocol,method,shots,mse,ci95_halfwidth";

inline void write_ate_summary_csv(std::ostream& os,
                                  const std::vector<AteSummaryRow>& rows) {
  os << kAteSummaryCsvHeader << '\n';
  for (const AteSummaryRow& r : rows) {
    detail::check_csv_token(r.protocol);
    detail::check_csv_token(r.method);
    os << r.protocol << ',' << r.method << ',' << r.shots << ','
       << format_double(r.mse) << ',' << format_double(r.ci95_halfwidth) << '\n';
  }
  if (!os) throw std::runtime_error("summary csv: stream write failed");
}

inline std::vector<AteSummaryRow> read_ate_summary_csv(std::istream& is) {
  detail::expect_header(is, kAteSummaryCsvHeader);
  std::vector<AteSummaryRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 5) throw std::runtime_error("summary csv: expected 5 fields");
    AteSummaryRow r;
    r.protocol = f[0];
    r.method = f[1];
    r.shots = static_cast<int>(parse_int(f[2]));
    r.mse = parse_double(f[3]);
    r.ci95_halfwidth = parse_double(f[4]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace covrep
