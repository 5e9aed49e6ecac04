#include "shotnoise/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "shotnoise/detail/format.hpp"
#include "shotnoise/errors.hpp"
#include "shotnoise/fluid.hpp"
#include "shotnoise/mc.hpp"
#include "shotnoise/model_io.hpp"
#include "shotnoise/ratefn.hpp"
#include "shotnoise/simulate.hpp"
#include "shotnoise/verify.hpp"
#include "shotnoise/version.hpp"

namespace shotnoise::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::fmt17;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;  // --seed overrides the config seed
  std::string out_dir = ".";
  int threads = 1;
};

void require_keys(const json& j, std::initializer_list<const char*> allowed,
                  const char* context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (key == k) {
        known = true;
        break;
      }
    if (!known) throw ConfigError(std::string(context) + ": unknown key '" + key + "'");
  }
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json load_config(const std::string& path, std::string* raw_out) {
  const std::string raw = slurp(path);
  if (raw_out) *raw_out = raw;
  try {
    return json::parse(raw);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_command_field(const json& cfg, const char* command) {
  if (cfg.contains("command") && cfg.at("command").get<std::string>() != command)
    throw ConfigError(std::string("config 'command' does not match subcommand '") + command +
                      "'");
}

ShotNoiseModel load_model(const json& cfg, const fs::path& config_dir) {
  if (cfg.contains("model") == cfg.contains("model_file"))
    throw ConfigError("config needs exactly one of 'model' or 'model_file'");
  try {
    if (cfg.contains("model")) return model_from_json(cfg.at("model"));
    const fs::path p = config_dir / cfg.at("model_file").get<std::string>();
    return model_from_file(p.string());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::optional<Control> load_control(const json& cfg, const fs::path& config_dir,
                                    const char* key, const char* file_key) {
  try {
    if (cfg.contains(key)) return Control::from_json(cfg.at(key));
    if (cfg.contains(file_key)) {
      const fs::path p = config_dir / cfg.at(file_key).get<std::string>();
      return Control::from_json(json::parse(slurp(p)));
    }
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("control parse error: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return std::nullopt;
}

std::uint64_t resolve_seed(const json& cfg, const CommonArgs& args) {
  if (args.seed) return *args.seed;
  if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
  return 0;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

struct ManifestWriter {
  std::string command;
  std::string config_path;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  std::vector<std::string> artifacts;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const fs::path& out_dir) const {
    char hash_hex[20];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                  static_cast<unsigned long long>(config_hash));
    const json manifest{
        {"command", command},
        {"config_path", config_path},
        {"config_fnv1a64", hash_hex},
        {"seed", seed},
        {"threads", threads},
        {"version", SHOTNOISE_VERSION},
        {"wall_time_seconds",
         std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
        {"artifacts", artifacts}};
    write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  }
};

int run_simulate(const CommonArgs& args) {
  std::string raw;
  const json cfg = load_config(args.config_path, &raw);
  require_keys(cfg,
               {"command", "model", "model_file", "epsilon", "seed", "replication", "control",
                "control_file", "grid_points"},
               "simulate config");
  check_command_field(cfg, "simulate");
  const fs::path config_dir = fs::path(args.config_path).parent_path();
  const ShotNoiseModel model = load_model(cfg, config_dir);
  if (!cfg.contains("epsilon")) throw ConfigError("simulate config: missing 'epsilon'");
  const double eps = cfg.at("epsilon").get<double>();
  const std::uint64_t seed = resolve_seed(cfg, args);
  const std::uint64_t replication =
      cfg.contains("replication") ? cfg.at("replication").get<std::uint64_t>() : 0;
  const std::optional<Control> control = load_control(cfg, config_dir, "control", "control_file");

  EventSet events = simulate_prm(model.marks, model.T, eps,
                                 control ? &*control : nullptr, seed, replication);
  std::vector<double> grid;
  if (cfg.contains("grid_points")) {
    const auto n = cfg.at("grid_points").get<std::size_t>();
    if (n < 2) throw ConfigError("simulate config: grid_points must be >= 2");
    for (std::size_t i = 0; i < n; ++i)
      grid.push_back(model.T * static_cast<double>(i) / static_cast<double>(n - 1));
  }

  ManifestWriter manifest{.command = "simulate",
                          .config_path = args.config_path,
                          .config_hash = fnv1a64(raw),
                          .seed = seed,
                          .threads = args.threads};

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  {
    std::ofstream ev(out_dir / "events.csv", std::ios::binary);
    write_events_csv(ev, events, model.marks);
  }
  const Path path = evolve_scaled_path(model, std::move(events), grid);
  {
    std::ofstream pf(out_dir / "path.csv", std::ios::binary);
    write_path_csv(pf, path);
  }
  manifest.artifacts = {"events.csv", "path.csv"};
  manifest.write(out_dir);
  return kExitOk;
}

int run_fluid(const CommonArgs& args) {
  std::string raw;
  const json cfg = load_config(args.config_path, &raw);
  require_keys(cfg, {"command", "model", "model_file", "control", "control_file", "tol"},
               "fluid config");
  check_command_field(cfg, "fluid");
  const fs::path config_dir = fs::path(args.config_path).parent_path();
  const ShotNoiseModel model = load_model(cfg, config_dir);
  const std::optional<Control> control = load_control(cfg, config_dir, "control", "control_file");
  if (!control) throw ConfigError("fluid config: missing 'control' or 'control_file'");
  const double tol = cfg.contains("tol") ? cfg.at("tol").get<double>() : 1e-9;

  ManifestWriter manifest{.command = "fluid",
                          .config_path = args.config_path,
                          .config_hash = fnv1a64(raw),
                          .seed = 0,
                          .threads = args.threads};

  const FluidSolution sol = solve_controlled_ode(model, *control, tol);
  std::ostringstream csv;
  csv << "t";
  for (int i = 1; i <= model.d; ++i) csv << ",xi" << i;
  csv << "\n";
  for (std::size_t r = 0; r < sol.grid.size(); ++r) {
    csv << fmt17(sol.grid[r]);
    for (double v : sol.values[r]) csv << "," << fmt17(v);
    csv << "\n";
  }
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "fluid.csv", csv.str());
  manifest.artifacts = {"fluid.csv"};
  manifest.write(out_dir);
  return kExitOk;
}

int run_rate(const CommonArgs& args) {
  std::string raw;
  const json cfg = load_config(args.config_path, &raw);
  require_keys(cfg,
               {"command", "model", "model_file", "constraint", "cells", "quad_subnodes",
                "constraint_tol", "grad_tol", "max_outer", "max_inner", "initial_penalty"},
               "rate config");
  check_command_field(cfg, "rate");
  const fs::path config_dir = fs::path(args.config_path).parent_path();
  const ShotNoiseModel model = load_model(cfg, config_dir);

  if (!cfg.contains("constraint")) throw ConfigError("rate config: missing 'constraint'");
  const json& jc = cfg.at("constraint");
  require_keys(jc, {"terminal", "times", "states"}, "rate constraint");
  RateConstraint constraint;
  try {
    if (jc.contains("terminal")) {
      constraint = RateConstraint::terminal_point(jc.at("terminal").get<Vec>());
    } else if (jc.contains("times") && jc.contains("states")) {
      constraint = RateConstraint::path_points(jc.at("times").get<std::vector<double>>(),
                                               jc.at("states").get<std::vector<Vec>>());
    } else {
      throw ConfigError("rate constraint: need 'terminal' or 'times'+'states'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("rate constraint: ") + e.what());
  }

  RateOptions opts;
  if (cfg.contains("cells")) opts.cells = cfg.at("cells").get<int>();
  if (cfg.contains("quad_subnodes")) opts.quad_subnodes = cfg.at("quad_subnodes").get<int>();
  if (cfg.contains("constraint_tol")) opts.constraint_tol = cfg.at("constraint_tol").get<double>();
  if (cfg.contains("grad_tol")) opts.grad_tol = cfg.at("grad_tol").get<double>();
  if (cfg.contains("max_outer")) opts.max_outer = cfg.at("max_outer").get<int>();
  if (cfg.contains("max_inner")) opts.max_inner = cfg.at("max_inner").get<int>();
  if (cfg.contains("initial_penalty")) opts.initial_penalty = cfg.at("initial_penalty").get<double>();

  ManifestWriter manifest{.command = "rate",
                          .config_path = args.config_path,
                          .config_hash = fnv1a64(raw),
                          .seed = 0,
                          .threads = args.threads};

  RateResult result = minimize_rate(model, constraint, opts);

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  write_text(out_dir / "rate.json", result.to_json().dump(2) + "\n");
  write_text(out_dir / "tilt.json", result.control.to_json().dump() + "\n");
  std::ostringstream csv;
  csv << "t";
  for (int i = 1; i <= model.d; ++i) csv << ",xi" << i;
  csv << "\n";
  for (std::size_t r = 0; r < result.fluid_path.grid.size(); ++r) {
    csv << fmt17(result.fluid_path.grid[r]);
    for (double v : result.fluid_path.values[r]) csv << "," << fmt17(v);
    csv << "\n";
  }
  write_text(out_dir / "fluid.csv", csv.str());
  manifest.artifacts = {"rate.json", "tilt.json", "fluid.csv"};
  manifest.write(out_dir);
  return kExitOk;
}

EventSpec thresholds_from_config(const json& cfg) {
  if (!cfg.contains("thresholds")) throw ConfigError("mc config: missing 'thresholds'");
  EventSpec spec;
  for (const json& jt : cfg.at("thresholds")) {
    require_keys(jt, {"coord", "value"}, "threshold");
    spec.thresholds.emplace_back(jt.at("coord").get<int>(), jt.at("value").get<double>());
  }
  if (spec.thresholds.empty()) throw ConfigError("mc config: empty 'thresholds'");
  return spec;
}

int run_mc(const CommonArgs& args) {
  std::string raw;
  const json cfg = load_config(args.config_path, &raw);
  require_keys(cfg,
               {"command", "model", "model_file", "mode", "method", "epsilon", "epsilons",
                "thresholds", "replications", "tilt", "tilt_file", "seed"},
               "mc config");
  check_command_field(cfg, "mc");
  const fs::path config_dir = fs::path(args.config_path).parent_path();
  const ShotNoiseModel model = load_model(cfg, config_dir);
  const EventSpec event = thresholds_from_config(cfg);
  const std::string mode = cfg.contains("mode") ? cfg.at("mode").get<std::string>() : "estimate";
  const std::string method =
      cfg.contains("method") ? cfg.at("method").get<std::string>() : "naive";
  const std::uint64_t seed = resolve_seed(cfg, args);
  const std::uint64_t replications =
      cfg.contains("replications") ? cfg.at("replications").get<std::uint64_t>() : 10000;
  const std::optional<Control> tilt = load_control(cfg, config_dir, "tilt", "tilt_file");

  ManifestWriter manifest{.command = "mc",
                          .config_path = args.config_path,
                          .config_hash = fnv1a64(raw),
                          .seed = seed,
                          .threads = args.threads};
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);

  if (mode == "estimate") {
    if (!cfg.contains("epsilon")) throw ConfigError("mc config: missing 'epsilon'");
    const double eps = cfg.at("epsilon").get<double>();
    MCReport report;
    if (method == "naive") {
      report = estimate_naive(model, eps, event, replications, seed, args.threads);
    } else if (method == "is") {
      if (!tilt) throw ConfigError("mc config: method 'is' needs 'tilt' or 'tilt_file'");
      report = estimate_is(model, eps, event, *tilt, replications, seed, args.threads);
    } else {
      throw ConfigError("mc config: method must be 'naive' or 'is' in estimate mode");
    }
    write_text(out_dir / "report.json", report.to_json().dump(2) + "\n");
    write_text(out_dir / "report.csv",
               MCReport::csv_header() + "\n" + report.csv_row() + "\n");
    manifest.artifacts = {"report.json", "report.csv"};
  } else if (mode == "decay") {
    if (!cfg.contains("epsilons")) throw ConfigError("mc config: decay mode needs 'epsilons'");
    const auto epsilons = cfg.at("epsilons").get<std::vector<double>>();
    const DecayTable table = ldp_decay_table(model, event, epsilons, method,
                                             tilt ? &*tilt : nullptr, replications, seed,
                                             args.threads);
    std::ostringstream csv;
    csv << table.csv();
    csv << "# intercept," << fmt17(table.intercept) << ",slope," << fmt17(table.slope)
        << ",valid," << (table.extrapolation_valid ? 1 : 0) << "\n";
    write_text(out_dir / "decay.csv", csv.str());
    manifest.artifacts = {"decay.csv"};
  } else {
    throw ConfigError("mc config: mode must be 'estimate' or 'decay'");
  }
  manifest.write(out_dir);
  return kExitOk;
}

int run_verify(const CommonArgs& args) {
  std::string raw;
  const json cfg = load_config(args.config_path, &raw);
  require_keys(cfg, {"command", "benchmark_dir", "tolerance_scale", "seed", "threads"},
               "verify config");
  check_command_field(cfg, "verify");
  const fs::path config_dir = fs::path(args.config_path).parent_path();

  VerifyOptions opts;
  opts.benchmark_dir =
      (config_dir / (cfg.contains("benchmark_dir") ? cfg.at("benchmark_dir").get<std::string>()
                                                   : std::string(".")))
          .string();
  if (cfg.contains("tolerance_scale")) opts.tolerance_scale = cfg.at("tolerance_scale").get<double>();
  opts.seed = resolve_seed(cfg, args);
  if (!args.seed && !cfg.contains("seed")) opts.seed = 42;
  opts.threads = args.threads;

  const auto results = run_acceptance_suite(opts);
  const bool all_passed = print_acceptance_results(results);

  ManifestWriter manifest{.command = "verify",
                          .config_path = args.config_path,
                          .config_hash = fnv1a64(raw),
                          .seed = opts.seed,
                          .threads = args.threads};
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  std::ostringstream table;
  for (const CriterionResult& r : results)
    table << r.id << "," << (r.passed ? "PASS" : "FAIL") << "," << r.detail << "\n";
  write_text(out_dir / "verify.csv", table.str());
  manifest.artifacts = {"verify.csv"};
  manifest.write(out_dir);
  return all_passed ? kExitOk : kExitInternal;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"state-dependent Poisson shot noise: simulation, fluid limits, "
               "rate functions and rare-event Monte Carlo"};
  app.require_subcommand(1);

  CommonArgs common;
  std::uint64_t seed_raw = 0;
  const char* names[] = {"simulate", "fluid", "rate", "mc", "verify"};
  const char* descriptions[] = {
      "draw a PRM realization and evolve the scaled path",
      "solve the controlled fluid integral equation",
      "minimize the entropy cost subject to a fluid constraint",
      "Monte Carlo estimates and LDP decay tables",
      "run the acceptance criteria against the bundled benchmarks"};
  std::vector<CLI::App*> subs;
  for (int i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], descriptions[i]);
    sub->add_option("--config", common.config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed_raw, "override the config seed");
    sub->add_option("--out", common.out_dir, "artifact output directory");
    sub->add_option("--threads", common.threads, "worker cap for replications");
    subs.push_back(sub);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return kExitOk;
    }
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  for (CLI::App* sub : subs)
    if (sub->parsed() && sub->count("--seed") > 0) common.seed = seed_raw;

  try {
    if (app.got_subcommand("simulate")) return run_simulate(common);
    if (app.got_subcommand("fluid")) return run_fluid(common);
    if (app.got_subcommand("rate")) return run_rate(common);
    if (app.got_subcommand("mc")) return run_mc(common);
    if (app.got_subcommand("verify")) return run_verify(common);
    std::cerr << "error: no command given\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NonConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << "\n";
    return kExitNonConvergence;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace shotnoise::cli
