#include "shotnoise/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "shotnoise/rng.hpp"

namespace shotnoise {

namespace {

// Equality-tight bounds need a hair of slack under floating point.
constexpr double kRelSlack = 1e-9;
constexpr double kAbsSlack = 1e-12;

std::string format_state(const Vec& x) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
  os << ")";
  return os.str();
}

}  // namespace

MarkSpace::MarkSpace(std::vector<Atom> atoms) : atoms_(std::move(atoms)) {
  if (atoms_.empty()) throw std::invalid_argument("mark space needs at least one atom");
  for (std::size_t k = 0; k < atoms_.size(); ++k) {
    const Atom& a = atoms_[k];
    if (a.id.empty()) throw std::invalid_argument("atom id must be non-empty");
    if (!(a.weight > 0.0) || !std::isfinite(a.weight))
      throw std::invalid_argument("atom '" + a.id + "': weight must be finite and positive");
    if (!index_.emplace(a.id, k).second)
      throw std::invalid_argument("duplicate atom id '" + a.id + "'");
    total_mass_ += a.weight;
  }
  if (!std::isfinite(total_mass_))
    throw std::invalid_argument("total mark mass must be finite");
}

std::optional<std::size_t> MarkSpace::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool CheckGrid::empty() const {
  return times.empty() || states.empty() || state_pairs.empty() || epsilons.empty();
}

CheckGrid CheckGrid::defaults(const ShotNoiseModel& model, std::uint64_t seed) {
  CheckGrid grid;
  grid.epsilons = {1.0, 0.1, 0.01, 0.001};
  const double eps_min = 0.001;
  const double t_max = 4.0 * model.T / eps_min;
  const double t_min = 1e-6 * t_max;
  const int n_times = 64;
  for (int i = 0; i < n_times; ++i) {
    const double f = static_cast<double>(i) / (n_times - 1);
    grid.times.push_back(t_min * std::pow(t_max / t_min, f));
  }
  const double m = 10.0;
  RngStream rng(seed, 0);
  auto draw_state = [&] {
    Vec x(static_cast<std::size_t>(model.d));
    for (double& v : x) v = rng.uniform(0.0, m);
    return x;
  };
  for (int i = 0; i < 32; ++i) grid.states.push_back(draw_state());
  grid.states.push_back(Vec(static_cast<std::size_t>(model.d), 0.0));
  for (int i = 0; i < 32; ++i) grid.state_pairs.emplace_back(draw_state(), draw_state());
  return grid;
}

bool ValidationReport::accepted() const {
  return std::all_of(checks.begin(), checks.end(),
                     [](const CheckResult& c) { return c.passed; });
}

Vec evaluate_shot(const ShotNoiseModel& model, double eps, double t, std::size_t atom,
                  const Vec& x) {
  if (!(eps > 0.0) || !std::isfinite(eps))
    throw std::invalid_argument("evaluate_shot: eps must be finite and positive");
  if (!(t >= 0.0)) throw std::invalid_argument("evaluate_shot: t must be nonnegative");
  if (x.size() != static_cast<std::size_t>(model.d))
    throw std::invalid_argument("evaluate_shot: state dimension mismatch");
  for (double v : x)
    if (!(v >= 0.0)) throw std::invalid_argument("evaluate_shot: state must be nonnegative");
  if (atom >= model.marks.size())
    throw std::invalid_argument("evaluate_shot: atom index out of range");

  Vec scaled(x);
  for (double& v : scaled) v *= eps;
  Vec out = model.hbar(t, atom, scaled);
  if (!model.zero_remainder) {
    const Vec r = model.remainder(eps, t, atom, scaled);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i];
  }
  for (double& v : out) v = std::max(v, 0.0);
  return out;
}

ValidationReport validate_model(const ShotNoiseModel& model, const CheckGrid& grid) {
  if (grid.empty()) throw std::invalid_argument("validate_model: empty check grid");

  ValidationReport report;
  const std::size_t n_atoms = model.marks.size();

  // (a) decomposition H_eps = hbar + R_eps: this representation stores the
  // two pieces separately, so the split holds by construction.
  report.checks.push_back({"a", "decomposition H_eps(t,z,x) = Hbar(t,z,eps x) + R_eps(t,z,eps x)",
                           true, 0.0, "holds by construction"});

  // (b) remainder envelope ||R_eps(t,z,x)|| <= varsigma(z)(||x|| + 1).
  {
    CheckResult check{"b", "remainder bounded by varsigma(z)(||x||+1)", true, 0.0, ""};
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double bound_coef = model.varsigma(k);
      for (double eps : grid.epsilons) {
        for (const Vec& x : grid.states) {
          std::vector<double> ts = grid.times;
          ts.push_back(0.0);
          for (double t : ts) {
            const Vec r = model.remainder(eps, t, k, x);
            const double lhs = norm2(r);
            const double rhs = bound_coef * (norm2(x) + 1.0);
            const double violation = lhs - (rhs * (1.0 + kRelSlack) + kAbsSlack);
            if (violation > check.worst) {
              check.worst = violation;
              check.passed = false;
              std::ostringstream os;
              os << "atom=" << model.marks.atom(k).id << " eps=" << eps << " t=" << t
                 << " x=" << format_state(x) << " ||R||=" << lhs << " bound=" << rhs;
              check.witness = os.str();
            }
          }
        }
      }
    }
    report.checks.push_back(std::move(check));
  }

  // (d) Hbar(0,z,x) = 0 and t -> Hbar(t,z,x) non-decreasing coordinate-wise.
  {
    CheckResult check{"d", "Hbar(0,z,x) = 0 and Hbar non-decreasing in t", true, 0.0, ""};
    std::vector<double> ts = grid.times;
    std::sort(ts.begin(), ts.end());
    for (std::size_t k = 0; k < n_atoms; ++k) {
      for (const Vec& x : grid.states) {
        const Vec at_zero = model.hbar(0.0, k, x);
        for (std::size_t i = 0; i < at_zero.size(); ++i) {
          const double violation = std::fabs(at_zero[i]) - kAbsSlack;
          if (violation > check.worst) {
            check.worst = violation;
            check.passed = false;
            std::ostringstream os;
            os << "atom=" << model.marks.atom(k).id << " Hbar(0) coord " << i << " = "
               << at_zero[i];
            check.witness = os.str();
          }
        }
        Vec prev = at_zero;
        double prev_t = 0.0;
        for (double t : ts) {
          const Vec cur = model.hbar(t, k, x);
          for (std::size_t i = 0; i < cur.size(); ++i) {
            const double violation =
                prev[i] - cur[i] - (kRelSlack * std::fabs(prev[i]) + kAbsSlack);
            if (violation > check.worst) {
              check.worst = violation;
              check.passed = false;
              std::ostringstream os;
              os << "atom=" << model.marks.atom(k).id << " t1=" << prev_t << " t2=" << t
                 << " coord " << i << ": Hbar drops " << prev[i] << " -> " << cur[i]
                 << " at x=" << format_state(x);
              check.witness = os.str();
            }
          }
          prev = cur;
          prev_t = t;
        }
      }
    }
    report.checks.push_back(std::move(check));
  }

  // (f) shot-value Lipschitz bound.
  {
    CheckResult check{"f", "||h(z,x)-h(z,x')|| <= L_h(z)||x-x'||", true, 0.0, ""};
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double lip = model.lipschitz(k);
      for (const auto& [x, y] : grid.state_pairs) {
        const double lhs = dist2(model.shot_value(k, x), model.shot_value(k, y));
        const double rhs = lip * dist2(x, y);
        const double violation = lhs - (rhs * (1.0 + kRelSlack) + kAbsSlack);
        if (violation > check.worst) {
          check.worst = violation;
          check.passed = false;
          std::ostringstream os;
          os << "atom=" << model.marks.atom(k).id << " x=" << format_state(x)
             << " x'=" << format_state(y) << " ||dh||=" << lhs << " bound=" << rhs;
          check.witness = os.str();
        }
      }
    }
    report.checks.push_back(std::move(check));
  }

  // (g) linear growth bound.
  {
    CheckResult check{"g", "||h(z,x)|| <= M_h(z)(1+||x||)", true, 0.0, ""};
    for (std::size_t k = 0; k < n_atoms; ++k) {
      const double growth = model.growth(k);
      for (const Vec& x : grid.states) {
        const double lhs = norm2(model.shot_value(k, x));
        const double rhs = growth * (1.0 + norm2(x));
        const double violation = lhs - (rhs * (1.0 + kRelSlack) + kAbsSlack);
        if (violation > check.worst) {
          check.worst = violation;
          check.passed = false;
          std::ostringstream os;
          os << "atom=" << model.marks.atom(k).id << " x=" << format_state(x)
             << " ||h||=" << lhs << " bound=" << rhs;
          check.witness = os.str();
        }
      }
    }
    report.checks.push_back(std::move(check));
  }

  return report;
}

double check_shot_value_limit(const ShotNoiseModel& model, std::size_t atom,
                              double state_bound, double t_max) {
  if (!(state_bound > 0.0)) throw std::invalid_argument("state_bound must be positive");
  if (!(t_max > 0.0)) throw std::invalid_argument("t_max must be positive");
  if (atom >= model.marks.size()) throw std::invalid_argument("atom index out of range");

  std::vector<double> ts;
  for (int i = 0; i < 8; ++i) ts.push_back(t_max * (1.0 + 0.05 * i));

  std::vector<Vec> states;
  const auto d = static_cast<std::size_t>(model.d);
  states.emplace_back(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    Vec axis(d, 0.0);
    axis[i] = state_bound;
    states.push_back(std::move(axis));
  }
  RngStream rng(77, atom);
  for (int i = 0; i < 16; ++i) {
    Vec x(d);
    for (double& v : x) v = rng.uniform(0.0, 1.0);
    const double n = norm2(x);
    const double scale = n > 0.0 ? rng.uniform(0.0, state_bound) / n : 0.0;
    for (double& v : x) v *= scale;
    states.push_back(std::move(x));
  }

  double worst = 0.0;
  for (double t : ts)
    for (const Vec& x : states)
      worst = std::max(worst, dist2(model.hbar(t, atom, x), model.shot_value(atom, x)));
  return worst;
}

}  // namespace shotnoise
