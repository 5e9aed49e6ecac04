#include "shotnoise/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "shotnoise/cli.hpp"
#include "shotnoise/errors.hpp"
#include "shotnoise/fluid.hpp"
#include "shotnoise/mc.hpp"
#include "shotnoise/model_io.hpp"
#include "shotnoise/ratefn.hpp"
#include "shotnoise/rng.hpp"
#include "shotnoise/simulate.hpp"

namespace shotnoise {

namespace {

namespace fs = std::filesystem;

constexpr double kEll2 = 0.38629436111989062;  // 2 ln 2 - 1

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing artifact '" + p.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct Suite {
  const VerifyOptions& opts;
  ShotNoiseModel unit_poisson;
  ShotNoiseModel affine_growth;
  fs::path bench_dir;

  explicit Suite(const VerifyOptions& o)
      : opts(o),
        unit_poisson(model_from_file((fs::path(o.benchmark_dir) / "unit_poisson.json").string())),
        affine_growth(model_from_file((fs::path(o.benchmark_dir) / "affine_growth.json").string())),
        bench_dir(fs::absolute(o.benchmark_dir)) {}

  double scale() const { return opts.tolerance_scale; }

  CriterionResult a1() const {
    CriterionResult r{"A1", "rate optimizer agrees with the Legendre oracle at a=2"};
    RateOptions ropts;
    ropts.cells = 16;
    const RateResult res =
        minimize_rate(unit_poisson, RateConstraint::terminal_point({2.0}), ropts);
    const double tol = 1e-3 * scale();
    const double diff = std::fabs(res.cost - kEll2);
    std::ostringstream os;
    os << "cost=" << res.cost << " target=" << kEll2 << " |diff|=" << diff << " tol=" << tol
       << " residual=" << res.residual;
    r.detail = os.str();
    r.passed = res.converged && diff <= tol;
    return r;
  }

  CriterionResult a2() const {
    CriterionResult r{"A2", "fluid solver matches the closed form e^{0.7t}-1"};
    const Control g1 = Control::constant(1.0, 1.0, 1);
    const FluidSolution sol = solve_controlled_ode(affine_growth, g1, 1e-9);
    double worst = 0.0;
    for (std::size_t i = 0; i < sol.grid.size(); ++i)
      worst = std::max(worst, std::fabs(sol.values[i][0] - std::expm1(0.7 * sol.grid[i])));
    const double tol = 1e-7 * scale();
    std::ostringstream os;
    os << "max |xi - exact| = " << worst << " tol=" << tol << " grid=" << sol.grid.size()
       << " levels=" << sol.refinement_levels;
    r.detail = os.str();
    r.passed = worst <= tol;
    return r;
  }

  CriterionResult a3() const {
    CriterionResult r{"A3", "controlled paths converge to the fluid limit as eps -> 0"};
    const Control g2 = Control::constant(2.0, 1.0, 1);
    const FluidSolution fluid = solve_controlled_ode(unit_poisson, g2, 1e-9);
    const double epsilons[] = {1e-1, 1e-2, 1e-3};
    double medians[3] = {0, 0, 0};
    for (int e = 0; e < 3; ++e) {
      std::vector<double> sups;
      sups.reserve(100);
      for (std::uint64_t stream = 0; stream < 100; ++stream) {
        EventSet ev =
            simulate_prm(unit_poisson.marks, 1.0, epsilons[e], &g2, opts.seed, stream);
        const Path path = evolve_scaled_path(unit_poisson, std::move(ev));
        double sup = 0.0;
        for (std::size_t i = 0; i < path.grid.size(); ++i)
          sup = std::max(sup, std::fabs(path.values[i][0] - fluid.at(path.grid[i])[0]));
        sups.push_back(sup);
      }
      medians[e] = median(std::move(sups));
    }
    const double tol = 0.05 * scale();
    std::ostringstream os;
    os << "medians eps {1e-1,1e-2,1e-3} = {" << medians[0] << ", " << medians[1] << ", "
       << medians[2] << "} need strictly decreasing and last < " << tol;
    r.detail = os.str();
    r.passed = medians[0] > medians[1] && medians[1] > medians[2] && medians[2] < tol;
    return r;
  }

  CriterionResult a4() const {
    CriterionResult r{"A4", "exact-tail decay extrapolation lands near the rate value"};
    const EventSpec spec{{{0, 2.0}}};
    const DecayTable table =
        ldp_decay_table(unit_poisson, spec, {0.1, 0.05, 0.025}, "exact", nullptr, 100, opts.seed);
    const double rel = std::fabs(table.intercept - kEll2) / kEll2;
    const double tol = 0.15 * scale();
    std::ostringstream os;
    os << "intercept=" << table.intercept << " target=" << kEll2 << " rel=" << rel
       << " tol=" << tol;
    r.detail = os.str();
    r.passed = table.extrapolation_valid && rel <= tol;
    return r;
  }

  CriterionResult a5() const {
    CriterionResult r{"A5", "importance sampling is unbiased against the exact tail"};
    const Control tilt = Control::constant(2.0, 1.0, 1);
    const EventSpec spec{{{0, 2.0}}};
    const MCReport tail =
        estimate_is(unit_poisson, 1.0 / 40.0, spec, tilt, 100000, opts.seed, opts.threads);
    const double exact = poisson_tail_exact(40.0, 80);
    const bool tail_ok =
        tail.se > 0.0 && std::fabs(tail.p_hat - exact) <= 3.0 * tail.se * scale();
    const MCReport weights =
        estimate_is(unit_poisson, 0.1, spec, tilt, 100000, opts.seed + 1, opts.threads);
    const bool weight_ok = weights.se_weight > 0.0 &&
                           std::fabs(weights.mean_weight - 1.0) <= 3.0 * weights.se_weight * scale();
    std::ostringstream os;
    os << "p_hat=" << tail.p_hat << " exact=" << exact << " 3se=" << 3.0 * tail.se
       << " | mean_w=" << weights.mean_weight << " 3se_w=" << 3.0 * weights.se_weight;
    r.detail = os.str();
    r.passed = tail_ok && weight_ok;
    return r;
  }

  CriterionResult a6() const {
    CriterionResult r{"A6", "adjoint gradients match central finite differences"};
    double worst_rel = 0.0;
    int worst_instance = -1;
    for (int i = 0; i < 20; ++i) {
      RngStream rng(opts.seed, 500 + static_cast<std::uint64_t>(i));
      const int d = 1 + i % 3;
      const int n_atoms = 1 + i % 2;
      const char* kinds[] = {"affine", "norm_affine", "payload"};
      const std::string kind = kinds[i % 3];

      nlohmann::json atoms = nlohmann::json::array();
      for (int k = 0; k < n_atoms; ++k) {
        nlohmann::json payload = nlohmann::json::array();
        const int payload_len = kind == "norm_affine" ? 1 : d;
        for (int c = 0; c < payload_len; ++c) payload.push_back(rng.uniform(0.2, 1.2));
        atoms.push_back({{"id", "a" + std::to_string(k)},
                         {"payload", payload},
                         {"weight", rng.uniform(0.3, 1.5)}});
      }
      nlohmann::json value{{"kind", kind}};
      if (kind == "affine") {
        value["base"] = rng.uniform(0.2, 1.0);
        value["slope"] = rng.uniform(0.2, 1.0);
      }
      const nlohmann::json spec{
          {"d", d},
          {"T", 1.0},
          {"atoms", atoms},
          {"shape", {{"family", "instantaneous"}, {"params", {{"value", value}}}}},
          {"remainder", {{"family", "none"}}},
          {"envelopes", {{"mode", "auto"}}}};
      const ShotNoiseModel model = model_from_json(spec);

      RateOptions ropts;
      ropts.cells = 4 + 4 * (i % 2);
      ropts.quad_subnodes = 8;

      RateConstraint constraint;
      if (i % 4 == 3) {
        Vec mid(static_cast<std::size_t>(d)), end(static_cast<std::size_t>(d));
        for (double& v : mid) v = rng.uniform(0.2, 1.0);
        for (double& v : end) v = rng.uniform(0.3, 1.5);
        constraint = RateConstraint::path_points({0.5, 1.0}, {mid, end});
      } else {
        Vec target(static_cast<std::size_t>(d));
        for (double& v : target) v = rng.uniform(0.3, 1.5);
        constraint = RateConstraint::terminal_point(target);
      }

      const std::size_t n_u = static_cast<std::size_t>(ropts.cells) * model.marks.size();
      const std::size_t n_r =
          static_cast<std::size_t>(d) * (constraint.is_terminal() ? 1 : constraint.times.size());
      std::vector<double> u(n_u), multipliers(n_r);
      for (double& v : u) v = rng.uniform(-0.7, 0.7);
      for (double& v : multipliers) v = rng.uniform(-0.5, 0.5);
      const double penalty = 1.0 + 9.0 * (i % 2);

      std::vector<double> grad;
      penalized_objective(model, constraint, ropts, u, multipliers, penalty, &grad);

      const double step = 1e-6;
      std::vector<double> fd(n_u);
      std::vector<double> up = u;
      for (std::size_t c = 0; c < n_u; ++c) {
        up[c] = u[c] + step;
        const double fp = penalized_objective(model, constraint, ropts, up, multipliers, penalty,
                                              nullptr);
        up[c] = u[c] - step;
        const double fm = penalized_objective(model, constraint, ropts, up, multipliers, penalty,
                                              nullptr);
        up[c] = u[c];
        fd[c] = (fp - fm) / (2.0 * step);
      }
      double diff = 0.0, denom = 1.0;
      for (std::size_t c = 0; c < n_u; ++c) {
        diff = std::max(diff, std::fabs(grad[c] - fd[c]));
        denom = std::max(denom, std::fabs(fd[c]));
      }
      const double rel = diff / denom;
      if (rel > worst_rel) {
        worst_rel = rel;
        worst_instance = i;
      }
    }
    const double tol = 1e-5 * scale();
    std::ostringstream os;
    os << "worst rel err = " << worst_rel << " (instance " << worst_instance << ") tol=" << tol;
    r.detail = os.str();
    r.passed = worst_rel <= tol;
    return r;
  }

  CriterionResult a7() const {
    CriterionResult r{"A7", "entropy inequality a b <= e^{sigma a} + ell(b)/sigma and ell invariants"};
    RngStream rng(opts.seed, 7);
    int violations = 0;
    double worst_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 10000; ++i) {
      const double a = rng.uniform_pos() * 10.0;
      const double b = rng.uniform_pos() * 10.0;
      const double sigma = rng.uniform(1.0, 10.0);
      const double lhs = a * b;
      const double rhs = std::exp(sigma * a) + ell(b) / sigma;
      worst_margin = std::min(worst_margin, rhs - lhs);
      if (lhs > rhs * (1.0 + 1e-12)) ++violations;
    }
    const double tol = 1e-12 * scale();
    bool invariants = std::fabs(ell(1.0)) <= tol && std::fabs(ell(0.0) - 1.0) <= tol &&
                      std::fabs(ell(std::exp(1.0)) - 1.0) <= 1e-12;
    for (int i = 0; i <= 2000 && invariants; ++i) {
      const double x = 50.0 * i / 2000.0;
      if (ell(x) < -tol) invariants = false;
    }
    for (int i = 0; i < 2000 && invariants; ++i) {
      const double x = rng.uniform(0.0, 20.0);
      const double y = rng.uniform(0.0, 20.0);
      if (ell(0.5 * (x + y)) > 0.5 * (ell(x) + ell(y)) + 1e-12) invariants = false;
    }
    std::ostringstream os;
    os << violations << "/10000 inequality violations, min margin=" << worst_margin
       << ", ell invariants " << (invariants ? "hold" : "broken");
    r.detail = os.str();
    r.passed = violations == 0 && invariants;
    return r;
  }

  CriterionResult a8() const {
    CriterionResult r{"A8", "simulate and mc artifacts are byte-identical across reruns"};
    fs::path scratch = opts.scratch_dir.empty()
                           ? fs::temp_directory_path() /
                                 ("shotnoise-verify-" +
                                  std::to_string(std::chrono::steady_clock::now()
                                                     .time_since_epoch()
                                                     .count()))
                           : fs::path(opts.scratch_dir);
    fs::create_directories(scratch);

    const std::string model_path = (bench_dir / "unit_poisson.json").string();
    const nlohmann::json sim_cfg{
        {"model_file", model_path}, {"epsilon", 0.02}, {"seed", 7},
        {"control", {{"time_grid", {0.0, 1.0}}, {"values", {{2.0}}}}}};
    const nlohmann::json mc_cfg{{"model_file", model_path},
                                {"mode", "estimate"},
                                {"method", "is"},
                                {"epsilon", 0.05},
                                {"thresholds", nlohmann::json::array({{{"coord", 0}, {"value", 1.5}}})},
                                {"replications", 2000},
                                {"seed", 9},
                                {"tilt", {{"time_grid", {0.0, 1.0}}, {"values", {{2.0}}}}}};
    {
      std::ofstream c1(scratch / "sim.json");
      c1 << sim_cfg.dump(2);
    }
    {
      std::ofstream c2(scratch / "mc.json");
      c2 << mc_cfg.dump(2);
    }

    auto run = [&](const char* cmd, const fs::path& cfg, const fs::path& out) {
      return cli::dispatch({cmd, "--config", cfg.string(), "--out", out.string(),
                            "--threads", std::to_string(opts.threads)});
    };
    bool ok = true;
    std::ostringstream os;
    if (run("simulate", scratch / "sim.json", scratch / "sim1") != 0 ||
        run("simulate", scratch / "sim.json", scratch / "sim2") != 0) {
      ok = false;
      os << "simulate run failed; ";
    } else {
      const bool ev_same = read_bytes(scratch / "sim1" / "events.csv") ==
                           read_bytes(scratch / "sim2" / "events.csv");
      const bool path_same = read_bytes(scratch / "sim1" / "path.csv") ==
                             read_bytes(scratch / "sim2" / "path.csv");
      ok = ok && ev_same && path_same;
      os << "events.csv " << (ev_same ? "identical" : "DIFFER") << ", path.csv "
         << (path_same ? "identical" : "DIFFER") << "; ";
    }
    if (run("mc", scratch / "mc.json", scratch / "mc1") != 0 ||
        run("mc", scratch / "mc.json", scratch / "mc2") != 0) {
      ok = false;
      os << "mc run failed";
    } else {
      const bool rep_same = read_bytes(scratch / "mc1" / "report.csv") ==
                            read_bytes(scratch / "mc2" / "report.csv");
      ok = ok && rep_same;
      os << "report.csv " << (rep_same ? "identical" : "DIFFER");
    }
    r.detail = os.str();
    r.passed = ok;
    if (opts.scratch_dir.empty()) fs::remove_all(scratch);
    return r;
  }
};

}  // namespace

std::vector<CriterionResult> run_acceptance_suite(const VerifyOptions& opts) {
  Suite suite(opts);
  std::vector<std::pair<std::function<CriterionResult()>, double>> plan = {
      {[&] { return suite.a1(); }, 60.0},  {[&] { return suite.a2(); }, 5.0},
      {[&] { return suite.a3(); }, 120.0}, {[&] { return suite.a4(); }, 0.0},
      {[&] { return suite.a5(); }, 0.0},   {[&] { return suite.a6(); }, 0.0},
      {[&] { return suite.a7(); }, 0.0},   {[&] { return suite.a8(); }, 0.0}};

  std::vector<CriterionResult> results;
  for (auto& [fn, budget] : plan) {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r.id = "A" + std::to_string(results.size() + 1);
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (budget > 0.0 && r.seconds >= budget) {
      r.passed = false;
      r.detail += " [runtime budget " + std::to_string(budget) + "s exceeded]";
    }
    results.push_back(std::move(r));
  }
  return results;
}

bool print_acceptance_results(const std::vector<CriterionResult>& results) {
  bool all = true;
  for (const CriterionResult& r : results) {
    std::printf("%-3s %-4s %s (%.2fs)\n", r.id.c_str(), r.passed ? "PASS" : "FAIL",
                r.detail.c_str(), r.seconds);
    all = all && r.passed;
  }
  std::printf("acceptance: %zu/%zu criteria passed\n",
              static_cast<std::size_t>(std::count_if(results.begin(), results.end(),
                                                     [](const CriterionResult& r) {
                                                       return r.passed;
                                                     })),
              results.size());
  return all;
}

}  // namespace shotnoise
