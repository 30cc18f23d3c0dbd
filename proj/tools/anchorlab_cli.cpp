#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "anchorlab/anchorlab.hpp"

namespace fs = std::filesystem;
using namespace anchorlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + '"';
}

int report_error(std::string_view kind, const std::string& location, const std::string& message) {
  std::cerr << "error kind=" << kind << " location=" << (location.empty() ? "-" : location)
            << " message=" << quoted(message) << '\n';
  if (kind == "invalid_config" || kind == "usage") return kExitConfig;
  if (kind == "io") return kExitIo;
  return kExitFailure;
}

/// Error::what() without the leading "<kind>: " (and an optional extra prefix).
std::string strip_prefix(const Error& e, const std::string& extra = {}) {
  std::string message = e.what();
  const auto kind = std::string(to_string(e.kind())) + ": ";
  if (message.starts_with(kind)) message.erase(0, kind.size());
  if (!extra.empty() && message.starts_with(extra)) message.erase(0, extra.size());
  return message;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv, const std::string& where) {
  std::vector<std::uint64_t> seeds;
  for (auto field : text::split(csv, ',')) {
    try {
      seeds.push_back(text::parse_int<std::uint64_t>(text::trim(field)));
    } catch (const Error&) {
      throw ConfigError(where, "expected a comma-separated list of non-negative integers");
    }
  }
  if (seeds.empty()) throw ConfigError(where, "empty seed list");
  return seeds;
}

std::vector<std::size_t> parse_k_list(const std::string& csv) {
  std::vector<std::size_t> ks;
  for (auto field : text::split(csv, ',')) {
    try {
      ks.push_back(text::parse_int<std::size_t>(text::trim(field)));
    } catch (const Error&) {
      throw ConfigError("--k", "expected a comma-separated list of positive integers");
    }
  }
  return ks;
}

void print_summary(std::ostream& os, const Summary& summary) {
  const auto& fields = summary_fields();
  os << "method seeds";
  for (std::size_t i = 1; i < fields.size(); ++i) os << ' ' << fields[i];
  os << '\n';
  for (const auto& row : summary.rows) {
    os << row.method << ' ' << row.seeds;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << row.mean[i] << "+-" << row.stddev[i];
      os << ' ' << cell.str();
    }
    os << '\n';
  }
}

struct TrainArgs {
  std::string spec;
  std::string out;
  std::string seeds;
  bool no_timestamp = false;
  std::size_t jobs = 1;
};

int cmd_train(const TrainArgs& a) {
  const auto spec = load_spec(a.spec);
  RunOptions opt;
  if (!a.out.empty()) opt.output_dir = fs::path(a.out);
  if (!a.seeds.empty()) {
    opt.seeds = parse_seed_list(a.seeds, "--seeds");
  } else if (const char* env = std::getenv("ANCHORLAB_SEED"); env && *env) {
    opt.seeds = parse_seed_list(env, "ANCHORLAB_SEED");
  }
  opt.timestamp = !a.no_timestamp;
  opt.jobs = a.jobs;
  const auto summary = run_spec(spec, opt);
  std::cout << "wrote " << experiment_dir(spec, opt).string() << '\n';
  print_summary(std::cout, summary);
  return kExitOk;
}

struct EnvArgs {
  std::string spec;
  std::string tree;
  EnvConfig env;
};

void add_env_options(CLI::App* app, EnvArgs& a) {
  app->add_option("--spec", a.spec, "Take the environment from this experiment spec");
  app->add_option("--tree", a.tree, "Read the tree from a serialized tree file");
  app->add_option("--depth", a.env.depth, "Tree depth D")->capture_default_str();
  app->add_option("--branching", a.env.branching, "Branching factor B (= vocabulary size)")->capture_default_str();
  app->add_option("--leaves", a.env.num_valid_leaves, "Number of valid leaves")->capture_default_str();
  app->add_option("--concentration", a.env.ref_concentration, "Reference logit bonus on valid paths")
      ->capture_default_str();
  app->add_option("--noise", a.env.ref_noise, "Std-dev of reference logit jitter")->capture_default_str();
  app->add_option("--env-seed", a.env.seed, "Tree generation seed")->capture_default_str();
}

ReasoningTree make_tree(const EnvArgs& a) {
  if (!a.tree.empty()) {
    std::istringstream in(read_file(a.tree));
    return read_tree(in);
  }
  if (!a.spec.empty()) return generate_tree(load_spec(a.spec).train.env);
  try {
    return generate_tree(a.env);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::invalid_config) throw ConfigError("env", e.what());
    throw;
  }
}

struct CoverageArgs {
  EnvArgs env;
  std::string k_list;
  std::string policy;
  std::string out;
};

int cmd_coverage(const CoverageArgs& a) {
  const auto tree = make_tree(a.env);
  std::vector<std::size_t> ks;
  if (a.k_list.empty()) {
    for (std::size_t k = 1; k < tree.vocab_size(); k *= 2) ks.push_back(k);
    ks.push_back(tree.vocab_size());
  } else {
    ks = parse_k_list(a.k_list);
    for (std::size_t k : ks)
      if (k < 1 || k > tree.vocab_size())
        throw ConfigError("--k", "K=" + std::to_string(k) + " outside [1, " + std::to_string(tree.vocab_size()) + "]");
  }
  std::optional<LogitTable> policy;
  if (!a.policy.empty()) {
    std::istringstream in(read_file(a.policy));
    policy = read_logit_table(in);
  }
  const auto rows = oracle_coverage(tree, policy ? *policy : tree.ref_policy(), ks);
  std::ofstream file;
  if (!a.out.empty()) file = open_output(a.out);
  std::ostream& os = a.out.empty() ? std::cout : file;
  os << "k,hits,total,recall,loss_rate\n";
  for (const auto& r : rows)
    os << r.k << ',' << r.hits << ',' << r.total << ',' << text::format_real(r.recall) << ','
       << text::format_real(r.loss_rate) << '\n';
  return kExitOk;
}

struct GradcheckArgs {
  GradcheckOptions opt;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto start = std::chrono::steady_clock::now();
  const auto checks = run_gradcheck(a.opt);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  bool ok = true;
  std::cout << "kernel,cases,max_rel_error,status\n";
  for (const auto& c : checks) {
    const bool pass = c.cases > 0 && c.max_rel_error < kGradcheckTolerance;
    ok = ok && pass;
    std::cout << c.kernel << ',' << c.cases << ',' << text::format_real(c.max_rel_error) << ','
              << (pass ? "ok" : "FAIL") << '\n';
  }
  std::cout << "# tolerance " << text::format_real(kGradcheckTolerance) << ", " << std::fixed << std::setprecision(2)
            << seconds << " s\n";
  if (!ok) return report_error("oracle_failure", "gradcheck", "a kernel exceeded the relative-error tolerance");
  return kExitOk;
}

struct DynamicsArgs {
  std::string scenario = "all";
  std::string out;
  std::uint64_t seed = 0;
  std::size_t steps = 200;
  std::size_t vocab = 8;
  double eta = 0.5;
};

std::vector<dynamics::DynamicsReport> run_dynamics(const DynamicsArgs& a) {
  using namespace dynamics;
  std::vector<DynamicsReport> reports;
  const bool all = a.scenario == "all";
  bool matched = all;
  if (a.vocab < 3) throw ConfigError("--vocab", "needs at least 3 tokens");
  Rng rng(a.seed);

  if (all || a.scenario == "passive") {
    matched = true;
    DynamicsReport r{"passive_suppression", {}, {}};
    std::vector<double> z(a.vocab, 0.0);
    bool negative = true;
    for (std::int64_t i = 0; i < 16; ++i) {
      for (double& x : z) x = rng.normal();
      const double dz = passive_suppression_step(z, 0, 1, 1.0, a.eta);
      r.add(i, "pi_valid", softmax(z)[1]);
      r.add(i, "delta_z_valid", dz);
      negative = negative && dz < 0;
    }
    r.checks.push_back({"valid_logit_decreases", negative});
    reports.push_back(std::move(r));
  }
  if (all || a.scenario == "vanishing") {
    matched = true;
    const std::vector<double> pis = {0.5, 0.1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0};
    reports.push_back(vanishing_recovery_sweep(pis, 1.0, a.eta));
  }
  if (all || a.scenario == "redistribution") {
    matched = true;
    std::vector<double> z(a.vocab);
    for (double& x : z) x = rng.normal();
    const Dist ref = softmax(z);
    const auto members = top_k(ref, std::max<std::size_t>(1, a.vocab / 2)).members;
    const VocabId err = top_k(ref, a.vocab).members.back();
    AnchorSet set(members.begin(), members.end());
    set.erase(err);
    reports.push_back(redistribution_compare(ref, err, set));
  }
  if (all || a.scenario == "collapse") {
    matched = true;
    std::vector<double> z(a.vocab, 0.0);
    z[0] = z[1] = 2.0;
    for (Method m : {Method::grpo, Method::apo}) {
      MethodConfig cfg;
      cfg.method = m;
      cfg.learning_rate = a.eta;
      cfg.anchor_k = std::min<std::size_t>(cfg.anchor_k, a.vocab / 2);
      Rng run = rng.split(static_cast<std::uint64_t>(m));
      reports.push_back(collapse_trajectory(z, AnchorSet{0, 1}, cfg, a.steps, run));
    }
  }
  if (!matched)
    throw ConfigError("--scenario", "unknown scenario '" + a.scenario +
                                        "' (expected all, passive, vanishing, redistribution, collapse)");
  return reports;
}

int cmd_dynamics(const DynamicsArgs& a) {
  const auto reports = run_dynamics(a);
  std::ofstream file;
  if (!a.out.empty()) file = open_output(a.out);
  std::ostream& os = a.out.empty() ? std::cout : file;
  dynamics::write_dynamics_csv(os, reports);
  bool ok = true;
  for (const auto& r : reports)
    for (const auto& c : r.checks) {
      std::cerr << "check " << r.scenario << ' ' << c.name << ' ' << (c.passed ? "ok" : "FAIL") << '\n';
      ok = ok && c.passed;
    }
  if (!ok) return report_error("check_failed", "dynamics", "a dynamics check failed");
  return kExitOk;
}

int cmd_summarize(const std::string& dir, const std::vector<std::string>& methods) {
  print_summary(std::cout, summarize(dir, methods));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anchorlab: anchored policy optimization on synthetic reasoning trees"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run every (method, seed) cell of an experiment spec");
  train_cmd->add_option("--spec", train.spec, "Experiment spec (JSON)")->required();
  train_cmd->add_option("--out", train.out, "Output directory (overrides the spec)");
  train_cmd->add_option("--seeds", train.seeds, "Comma-separated seeds (overrides spec and ANCHORLAB_SEED)");
  train_cmd->add_flag("--no-timestamp", train.no_timestamp, "Omit the '# generated' line from metrics.csv");
  train_cmd->add_option("--jobs", train.jobs, "Cells to run concurrently")->check(CLI::PositiveNumber);

  DynamicsArgs dyn;
  auto* dyn_cmd = app.add_subcommand("dynamics", "Run the softmax-dynamics scenarios and emit tidy CSV");
  dyn_cmd->add_option("--scenario", dyn.scenario, "all, passive, vanishing, redistribution or collapse")
      ->capture_default_str();
  dyn_cmd->add_option("--out", dyn.out, "CSV output file (default: stdout)");
  dyn_cmd->add_option("--seed", dyn.seed, "Random seed")->capture_default_str();
  dyn_cmd->add_option("--steps", dyn.steps, "Bandit steps for the collapse scenario")->capture_default_str();
  dyn_cmd->add_option("--vocab", dyn.vocab, "Vocabulary size")->capture_default_str();
  dyn_cmd->add_option("--eta", dyn.eta, "Learning rate")->capture_default_str();

  CoverageArgs cov;
  auto* cov_cmd = app.add_subcommand("coverage", "Teacher-forced Top-K recall of the reference (or a given) policy");
  add_env_options(cov_cmd, cov.env);
  cov_cmd->add_option("--k", cov.k_list, "Comma-separated K values (default: powers of two up to V, then V)");
  cov_cmd->add_option("--policy", cov.policy, "LogitTable file to evaluate instead of the reference policy");
  cov_cmd->add_option("--out", cov.out, "CSV output file (default: stdout)");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference verification of every analytic gradient");
  gc_cmd->add_option("--cases", gc.opt.cases, "Random cases per kernel")->capture_default_str();
  gc_cmd->add_option("--seed", gc.opt.seed, "Random seed")->capture_default_str();

  std::string sum_dir;
  std::vector<std::string> sum_methods;
  auto* sum_cmd = app.add_subcommand("summarize", "Aggregate per-seed metrics into summary, curve and Pareto CSVs");
  sum_cmd->add_option("dir", sum_dir, "Experiment directory <out>/<name>")->required();
  sum_cmd->add_option("--methods", sum_methods, "Method directories to include, in order")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", "argv", e.what());
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*dyn_cmd) return cmd_dynamics(dyn);
    if (*cov_cmd) return cmd_coverage(cov);
    if (*gc_cmd) return cmd_gradcheck(gc);
    if (*sum_cmd) return cmd_summarize(sum_dir, sum_methods);
  } catch (const ConfigError& e) {
    return report_error("invalid_config", e.location(), strip_prefix(e, e.location() + ": "));
  } catch (const Error& e) {
    return report_error(to_string(e.kind()), "", strip_prefix(e));
  } catch (const fs::filesystem_error& e) {
    return report_error("io", e.path1().string(), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", "", e.what());
  }
  return kExitFailure;
}
