#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "anchorlab/env.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/metrics.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/text.hpp"
#include "anchorlab/trainer.hpp"

namespace anchorlab {

/// Configuration error carrying the offending location: a JSON pointer for
/// schema problems, `byte <n>` for syntax errors.
class ConfigError : public Error {
 public:
  ConfigError(std::string location, const std::string& what)
      : Error(ErrorKind::invalid_config, location + ": " + what), location_(std::move(location)) {}
  const std::string& location() const noexcept { return location_; }

 private:
  std::string location_;
};

struct NamedMethod {
  std::string name;
  MethodConfig config;
  bool operator==(const NamedMethod&) const = default;
};

/// One experiment: a method matrix trained over a list of seeds. The train
/// template's method_config and seed are overwritten per cell.
struct ExperimentSpec {
  std::string name = "experiment";
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds = {0};
  std::vector<NamedMethod> methods;
  TrainConfig train;

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("/name", "must be a non-empty path component");
    if (seeds.empty()) throw ConfigError("/seeds", "must list at least one seed");
    if (methods.empty()) throw ConfigError("/methods", "must list at least one method");
    std::set<std::string> names;
    for (std::size_t i = 0; i < methods.size(); ++i) {
      const auto loc = "/methods/" + std::to_string(i);
      if (methods[i].name.empty() || methods[i].name.find('/') != std::string::npos)
        throw ConfigError(loc + "/name", "must be a non-empty path component");
      if (!names.insert(methods[i].name).second) throw ConfigError(loc + "/name", "duplicate method name '" + methods[i].name + "'");
      try {
        methods[i].config.validate();
      } catch (const Error& e) {
        throw ConfigError(loc, e.what());
      }
    }
    try {
      TrainConfig t = train;
      t.method_config = methods.front().config;
      t.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("/train", e.what());
    }
  }

  bool operator==(const ExperimentSpec&) const = default;
};

namespace detail {

using json = nlohmann::ordered_json;

class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "/" : path_, "expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const auto loc = path_ + "/" + key;
    if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) throw ConfigError(loc, "expected a string");
      out = it->template get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw ConfigError(loc, "expected a number");
      out = it->template get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_unsigned())
        throw ConfigError(loc, "expected a non-negative integer");
      out = it->template get<T>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported field type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.contains(key)) throw ConfigError(path_ + "/" + key, "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline EnvConfig parse_env(const json& j, const std::string& path) {
  EnvConfig e;
  JsonReader r(j, path);
  r.read("depth", e.depth);
  r.read("branching", e.branching);
  r.read("num_valid_leaves", e.num_valid_leaves);
  r.read("ref_concentration", e.ref_concentration);
  r.read("ref_noise", e.ref_noise);
  r.read("seed", e.seed);
  r.finish();
  try {
    e.validate();
  } catch (const Error& err) {
    throw ConfigError(path, err.what());
  }
  return e;
}

inline json env_to_json(const EnvConfig& e) {
  return json{{"depth", e.depth},
              {"branching", e.branching},
              {"num_valid_leaves", e.num_valid_leaves},
              {"ref_concentration", e.ref_concentration},
              {"ref_noise", e.ref_noise},
              {"seed", e.seed}};
}

inline NamedMethod parse_method_entry(const json& j, const std::string& path) {
  NamedMethod m;
  JsonReader r(j, path);
  std::string kind;
  r.read("method", kind);
  if (kind.empty()) throw ConfigError(path + "/method", "missing method kind");
  try {
    m.config.method = parse_method(kind);
  } catch (const Error& e) {
    throw ConfigError(path + "/method", e.what());
  }
  m.name = kind;
  r.read("name", m.name);
  r.read("clip_eps", m.config.clip_eps);
  r.read("push_coef", m.config.push_coef);
  r.read("pull_coef", m.config.pull_coef);
  r.read("anchor_k", m.config.anchor_k);
  r.read("kl_coef", m.config.kl_coef);
  r.read("learning_rate", m.config.learning_rate);
  r.read("group_size", m.config.group_size);
  r.read("adv_eps", m.config.adv_eps);
  r.finish();
  return m;
}

inline json method_to_json(const NamedMethod& m) {
  const auto& c = m.config;
  return json{{"name", m.name},         {"method", std::string(to_string(c.method))},
              {"clip_eps", c.clip_eps}, {"push_coef", c.push_coef},
              {"pull_coef", c.pull_coef}, {"anchor_k", c.anchor_k},
              {"kl_coef", c.kl_coef},   {"learning_rate", c.learning_rate},
              {"group_size", c.group_size}, {"adv_eps", c.adv_eps}};
}

}  // namespace detail

/// Parses a spec document. Missing keys take the defaults; unknown keys are errors.
inline ExperimentSpec parse_spec(const std::string& document) {
  using detail::json;
  json j;
  try {
    j = json::parse(document);
  } catch (const json::parse_error& e) {
    throw ConfigError("byte " + std::to_string(e.byte), "syntax error");
  }
  ExperimentSpec spec;
  detail::JsonReader top(j, "");
  top.read("name", spec.name);
  top.read("output_dir", spec.output_dir);
  if (const auto* seeds = top.child("seeds")) {
    if (!seeds->is_array()) throw ConfigError("/seeds", "expected an array of integers");
    spec.seeds.clear();
    for (std::size_t i = 0; i < seeds->size(); ++i) {
      const auto& s = (*seeds)[i];
      if (!s.is_number_unsigned()) throw ConfigError("/seeds/" + std::to_string(i), "expected a non-negative integer");
      spec.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  if (const auto* env = top.child("env")) spec.train.env = detail::parse_env(*env, "/env");
  if (const auto* extra = top.child("extra_envs")) {
    if (!extra->is_array()) throw ConfigError("/extra_envs", "expected an array");
    for (std::size_t i = 0; i < extra->size(); ++i)
      spec.train.extra_envs.push_back(detail::parse_env((*extra)[i], "/extra_envs/" + std::to_string(i)));
  }
  if (const auto* train = top.child("train")) {
    detail::JsonReader r(*train, "/train");
    r.read("total_steps", spec.train.total_steps);
    r.read("groups_per_step", spec.train.groups_per_step);
    r.read("inner_epochs", spec.train.inner_epochs);
    r.read("eval_every", spec.train.eval_every);
    if (const auto* eval = r.child("eval")) {
      detail::JsonReader e(*eval, "/train/eval");
      e.read("samples_K", spec.train.eval.samples_K);
      e.read("prompts", spec.train.eval.prompts);
      e.read("support_k", spec.train.eval.support_k);
      e.read("bleu_order", spec.train.eval.bleu_order);
      e.finish();
    }
    r.finish();
  }
  if (const auto* methods = top.child("methods")) {
    if (!methods->is_array()) throw ConfigError("/methods", "expected an array");
    for (std::size_t i = 0; i < methods->size(); ++i)
      spec.methods.push_back(detail::parse_method_entry((*methods)[i], "/methods/" + std::to_string(i)));
  }
  top.finish();
  spec.validate();
  return spec;
}

/// Canonical form: every field written explicitly, fixed key order.
inline std::string spec_to_json(const ExperimentSpec& spec) {
  using detail::json;
  json j;
  j["name"] = spec.name;
  j["output_dir"] = spec.output_dir;
  j["seeds"] = spec.seeds;
  j["env"] = detail::env_to_json(spec.train.env);
  j["extra_envs"] = json::array();
  for (const auto& e : spec.train.extra_envs) j["extra_envs"].push_back(detail::env_to_json(e));
  j["train"] = json{{"total_steps", spec.train.total_steps},
                    {"groups_per_step", spec.train.groups_per_step},
                    {"inner_epochs", spec.train.inner_epochs},
                    {"eval_every", spec.train.eval_every},
                    {"eval",
                     {{"samples_K", spec.train.eval.samples_K},
                      {"prompts", spec.train.eval.prompts},
                      {"support_k", spec.train.eval.support_k},
                      {"bleu_order", spec.train.eval.bleu_order}}}};
  j["methods"] = json::array();
  for (const auto& m : spec.methods) j["methods"].push_back(detail::method_to_json(m));
  return j.dump(2) + "\n";
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ExperimentSpec load_spec(const std::filesystem::path& path) { return parse_spec(read_file(path)); }

inline TrainConfig cell_config(const ExperimentSpec& spec, const NamedMethod& method, std::uint64_t seed) {
  TrainConfig cfg = spec.train;
  cfg.method_config = method.config;
  cfg.seed = seed;
  return cfg;
}

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;  // overrides spec.output_dir
  std::optional<std::vector<std::uint64_t>> seeds;  // overrides spec.seeds
  bool timestamp = true;                            // leading '# generated' line in metrics.csv
  std::size_t jobs = 1;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) fail(ErrorKind::io, "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  return out;
}

inline std::filesystem::path experiment_dir(const ExperimentSpec& spec, const RunOptions& opt) {
  return opt.output_dir.value_or(std::filesystem::path(spec.output_dir)) / spec.name;
}

/// Trains one (method, seed) cell and writes
/// <dir>/<method>/<seed>/metrics.csv and steps.jsonl.
inline std::vector<MetricRecord> run_cell(const ExperimentSpec& spec, const NamedMethod& method, std::uint64_t seed,
                                          const std::filesystem::path& dir, bool timestamp) {
  const auto cell = dir / method.name / std::to_string(seed);
  auto steps = open_output(cell / "steps.jsonl");
  const auto records = run_experiment(cell_config(spec, method, seed),
                                      [&](const StepStats& s) { write_step_jsonl(steps, s, timestamp); });
  auto metrics = open_output(cell / "metrics.csv");
  write_metrics_csv(metrics, records, timestamp ? utc_timestamp() : std::string{});
  if (!metrics || !steps) fail(ErrorKind::io, "write failed under " + cell.string());
  return records;
}

struct SummaryRow {
  std::string method;
  std::size_t seeds = 0;
  std::vector<double> mean;  // one per summary field
  std::vector<double> stddev;
};

inline const std::vector<std::string>& summary_fields() {
  static const std::vector<std::string> fields = {"step",      "pass1",        "passK", "entropy", "maxprob",
                                                  "diversity", "support_mass", "kl",    "eval_K"};
  return fields;
}

inline std::vector<double> record_values(const MetricRecord& r) {
  return {static_cast<double>(r.step), r.pass_at_1,       r.pass_at_K,    r.mean_entropy,
          r.mean_max_prob,             r.diversity_score, r.support_mass, r.kl_to_ref,
          static_cast<double>(r.eval_K)};
}

/// Mean and sample standard deviation (n - 1; 0 for a single seed) of the
/// final MetricRecord of each seed.
inline SummaryRow summarize_method(const std::string& method, const std::vector<MetricRecord>& finals) {
  SummaryRow row;
  row.method = method;
  row.seeds = finals.size();
  const std::size_t f = summary_fields().size();
  row.mean.assign(f, 0.0);
  row.stddev.assign(f, 0.0);
  if (finals.empty()) return row;
  for (const auto& r : finals) {
    const auto v = record_values(r);
    for (std::size_t i = 0; i < f; ++i) row.mean[i] += v[i];
  }
  for (double& m : row.mean) m /= static_cast<double>(finals.size());
  if (finals.size() > 1) {
    for (const auto& r : finals) {
      const auto v = record_values(r);
      for (std::size_t i = 0; i < f; ++i) row.stddev[i] += (v[i] - row.mean[i]) * (v[i] - row.mean[i]);
    }
    for (double& s : row.stddev) s = std::sqrt(s / static_cast<double>(finals.size() - 1));
  }
  return row;
}

struct Summary {
  std::vector<SummaryRow> rows;
};

/// Reads <dir>/<method>/<seed>/metrics.csv for every method directory (or
/// only `methods`, in that order, when given) and writes summary.csv,
/// curves.csv (tidy per-eval-point series) and pareto.csv (final pass1 vs passK).
inline Summary summarize(const std::filesystem::path& dir, const std::vector<std::string>& methods = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) fail(ErrorKind::io, "no such directory " + dir.string());
  std::vector<std::string> names = methods;
  if (names.empty()) {
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_directory()) names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
  }
  Summary summary;
  auto curves = open_output(dir / "curves.csv");
  auto pareto = open_output(dir / "pareto.csv");
  curves << "method,seed,step,quantity,value\n";
  pareto << "method,seed,pass1,passK\n";
  for (const auto& name : names) {
    std::vector<std::pair<std::uint64_t, fs::path>> seeds;
    if (!fs::is_directory(dir / name)) fail(ErrorKind::io, "missing method directory " + (dir / name).string());
    for (const auto& entry : fs::directory_iterator(dir / name)) {
      if (!entry.is_directory() || !fs::exists(entry.path() / "metrics.csv")) continue;
      try {
        seeds.emplace_back(text::parse_int<std::uint64_t>(entry.path().filename().string()), entry.path());
      } catch (const Error&) {
        continue;
      }
    }
    std::sort(seeds.begin(), seeds.end());
    std::vector<MetricRecord> finals;
    for (const auto& [seed, path] : seeds) {
      std::istringstream in(read_file(path / "metrics.csv"));
      const auto records = read_metrics_csv(in);
      if (records.empty()) continue;
      for (const auto& r : records) {
        const auto v = record_values(r);
        for (std::size_t i = 1; i < v.size(); ++i)
          curves << name << ',' << seed << ',' << r.step << ',' << summary_fields()[i] << ','
                 << text::format_real(v[i]) << '\n';
      }
      pareto << name << ',' << seed << ',' << text::format_real(records.back().pass_at_1) << ','
             << text::format_real(records.back().pass_at_K) << '\n';
      finals.push_back(records.back());
    }
    summary.rows.push_back(summarize_method(name, finals));
  }
  auto out = open_output(dir / "summary.csv");
  out << "method,seeds";
  for (const auto& f : summary_fields()) out << ',' << f << "_mean," << f << "_std";
  out << '\n';
  for (const auto& row : summary.rows) {
    out << row.method << ',' << row.seeds;
    for (std::size_t i = 0; i < row.mean.size(); ++i)
      out << ',' << text::format_real(row.mean[i]) << ',' << text::format_real(row.stddev[i]);
    out << '\n';
  }
  if (!out || !curves || !pareto) fail(ErrorKind::io, "write failed under " + dir.string());
  return summary;
}

/// Runs every (method, seed) cell, up to `jobs` at a time, then summarizes.
/// Cells share nothing mutable, so outputs do not depend on scheduling.
inline Summary run_spec(const ExperimentSpec& spec, const RunOptions& opt = {}) {
  spec.validate();
  const auto dir = experiment_dir(spec, opt);
  const auto seeds = opt.seeds.value_or(spec.seeds);
  if (seeds.empty()) throw ConfigError("/seeds", "must list at least one seed");
  {
    auto out = open_output(dir / "spec.json");
    out << spec_to_json(spec);
  }
  std::vector<std::pair<const NamedMethod*, std::uint64_t>> cells;
  for (const auto& m : spec.methods)
    for (auto s : seeds) cells.emplace_back(&m, s);

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        run_cell(spec, *cells[i].first, cells[i].second, dir, opt.timestamp);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);

  std::vector<std::string> names;
  for (const auto& m : spec.methods) names.push_back(m.name);
  return summarize(dir, names);
}

}  // namespace anchorlab
