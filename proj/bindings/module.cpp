#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "json.hpp"
#include "shotnoise/fluid.hpp"
#include "shotnoise/mc.hpp"
#include "shotnoise/model_io.hpp"
#include "shotnoise/ratefn.hpp"
#include "shotnoise/simulate.hpp"
#include "shotnoise/verify.hpp"
#include "shotnoise/version.hpp"

namespace py = pybind11;
using namespace shotnoise;

namespace {

Control control_from_text(const std::string& text) {
  return Control::from_json(nlohmann::json::parse(text));
}

EventSpec make_event_spec(const std::vector<std::pair<int, double>>& thresholds) {
  return EventSpec{thresholds};
}

}  // namespace

PYBIND11_MODULE(_shotnoise, m) {
  m.doc() = "state-dependent Poisson shot noise: simulation, fluid limits, rate "
            "functions and rare-event Monte Carlo";
  m.attr("__version__") = SHOTNOISE_VERSION;

  py::register_exception<NonConvergenceError>(m, "NonConvergenceError");
  py::register_exception<InfeasibleError>(m, "InfeasibleError");
  py::register_exception<DegenerateWeightError>(m, "DegenerateWeightError");

  py::class_<ShotNoiseModel>(m, "Model")
      .def_readonly("d", &ShotNoiseModel::d)
      .def_readonly("T", &ShotNoiseModel::T)
      .def_readonly("instantaneous", &ShotNoiseModel::instantaneous)
      .def_readonly("state_independent", &ShotNoiseModel::state_independent)
      .def("atom_count", [](const ShotNoiseModel& mdl) { return mdl.marks.size(); })
      .def("total_mass", [](const ShotNoiseModel& mdl) { return mdl.marks.total_mass(); });

  m.def("load_model", &model_from_json_text, py::arg("json_text"),
        "Build a model from its JSON description");
  m.def("load_model_file", &model_from_file, py::arg("path"));

  py::class_<Control>(m, "Control")
      .def(py::init(&control_from_text), py::arg("json_text"))
      .def_static("constant", &Control::constant, py::arg("level"), py::arg("horizon"),
                  py::arg("n_atoms"), py::arg("n_cells") = 1)
      .def_property_readonly("cells", &Control::cells)
      .def_property_readonly("atoms", &Control::atoms)
      .def("value", &Control::value)
      .def("to_json", [](const Control& c) { return c.to_json().dump(); });

  py::class_<Event>(m, "Event")
      .def_readonly("time", &Event::time)
      .def_readonly("atom", &Event::atom);

  py::class_<EventSet>(m, "EventSet")
      .def_readonly("epsilon", &EventSet::epsilon)
      .def_readonly("events", &EventSet::events)
      .def_readonly("seed", &EventSet::seed)
      .def_readonly("stream", &EventSet::stream)
      .def("__len__", [](const EventSet& e) { return e.events.size(); });

  py::class_<Path>(m, "Path")
      .def_readonly("epsilon", &Path::epsilon)
      .def_readonly("grid", &Path::grid)
      .def_readonly("values", &Path::values)
      .def("terminal", [](const Path& p) { return p.values.back(); });

  m.def(
      "simulate",
      [](const ShotNoiseModel& model, double eps, std::uint64_t seed, std::uint64_t stream,
         const Control* control) {
        return simulate_prm(model.marks, model.T, eps, control, seed, stream);
      },
      py::arg("model"), py::arg("eps"), py::arg("seed"), py::arg("stream") = 0,
      py::arg("control") = nullptr);
  m.def(
      "evolve",
      [](const ShotNoiseModel& model, const EventSet& events, std::vector<double> grid) {
        return evolve_scaled_path(model, events, std::move(grid));
      },
      py::arg("model"), py::arg("events"), py::arg("grid") = std::vector<double>{});
  m.def(
      "likelihood_weight",
      [](const ShotNoiseModel& model, const EventSet& events, const Control& control) {
        return likelihood_weight(events, control, model.marks, model.T);
      },
      py::arg("model"), py::arg("events"), py::arg("control"));

  m.def("ell", &ell, py::arg("r"));
  m.def(
      "cost",
      [](const ShotNoiseModel& model, const Control& control) {
        return cost_LT(control, model.marks, model.T);
      },
      py::arg("model"), py::arg("control"));

  py::class_<FluidSolution>(m, "FluidSolution")
      .def_readonly("grid", &FluidSolution::grid)
      .def_readonly("values", &FluidSolution::values)
      .def_readonly("achieved_tolerance", &FluidSolution::achieved_tolerance)
      .def("at", &FluidSolution::at);

  m.def(
      "solve_fluid",
      [](const ShotNoiseModel& model, const Control& control, double tol) {
        return solve_controlled_ode(model, control, tol);
      },
      py::arg("model"), py::arg("control"), py::arg("tol") = 1e-9);

  m.def(
      "legendre_oracle",
      [](const ShotNoiseModel& model, const Vec& target) {
        return legendre_oracle(model, target, model.T);
      },
      py::arg("model"), py::arg("target"));

  py::class_<RateResult>(m, "RateResult")
      .def_readonly("cost", &RateResult::cost)
      .def_readonly("residual", &RateResult::residual)
      .def_readonly("converged", &RateResult::converged)
      .def_readonly("control", &RateResult::control)
      .def("to_json", [](const RateResult& r) { return r.to_json().dump(); });

  m.def(
      "minimize_rate",
      [](const ShotNoiseModel& model, const Vec& terminal, int cells, double constraint_tol) {
        RateOptions opts;
        opts.cells = cells;
        opts.constraint_tol = constraint_tol;
        return minimize_rate(model, RateConstraint::terminal_point(terminal), opts);
      },
      py::arg("model"), py::arg("terminal"), py::arg("cells") = 16,
      py::arg("constraint_tol") = 1e-6);
  m.def("export_tilt", &export_tilt, py::arg("result"));

  py::class_<MCReport>(m, "MCReport")
      .def_readonly("p_hat", &MCReport::p_hat)
      .def_readonly("se", &MCReport::se)
      .def_readonly("rel_err", &MCReport::rel_err)
      .def_readonly("mean_weight", &MCReport::mean_weight)
      .def_readonly("se_weight", &MCReport::se_weight)
      .def_readonly("method", &MCReport::method)
      .def_readonly("replications", &MCReport::replications)
      .def("to_json", [](const MCReport& r) { return r.to_json().dump(); });

  m.def(
      "estimate_naive",
      [](const ShotNoiseModel& model, double eps,
         const std::vector<std::pair<int, double>>& thresholds, std::uint64_t replications,
         std::uint64_t seed, int threads) {
        return estimate_naive(model, eps, make_event_spec(thresholds), replications, seed,
                              threads);
      },
      py::arg("model"), py::arg("eps"), py::arg("thresholds"), py::arg("replications"),
      py::arg("seed"), py::arg("threads") = 1);
  m.def(
      "estimate_is",
      [](const ShotNoiseModel& model, double eps,
         const std::vector<std::pair<int, double>>& thresholds, const Control& tilt,
         std::uint64_t replications, std::uint64_t seed, int threads) {
        return estimate_is(model, eps, make_event_spec(thresholds), tilt, replications, seed,
                           threads);
      },
      py::arg("model"), py::arg("eps"), py::arg("thresholds"), py::arg("tilt"),
      py::arg("replications"), py::arg("seed"), py::arg("threads") = 1);
  m.def("poisson_tail_exact", &poisson_tail_exact, py::arg("mean"), py::arg("k"));

  py::class_<DecayRow>(m, "DecayRow")
      .def_readonly("epsilon", &DecayRow::epsilon)
      .def_readonly("p_hat", &DecayRow::p_hat)
      .def_readonly("se", &DecayRow::se)
      .def_readonly("neg_eps_log_p", &DecayRow::neg_eps_log_p)
      .def_readonly("flagged", &DecayRow::flagged);
  py::class_<DecayTable>(m, "DecayTable")
      .def_readonly("rows", &DecayTable::rows)
      .def_readonly("intercept", &DecayTable::intercept)
      .def_readonly("slope", &DecayTable::slope)
      .def_readonly("extrapolation_valid", &DecayTable::extrapolation_valid)
      .def("csv", &DecayTable::csv);
  m.def(
      "decay_table",
      [](const ShotNoiseModel& model, const std::vector<std::pair<int, double>>& thresholds,
         std::vector<double> epsilons, const std::string& method, const Control* tilt,
         std::uint64_t replications, std::uint64_t seed, int threads) {
        return ldp_decay_table(model, make_event_spec(thresholds), std::move(epsilons), method,
                               tilt, replications, seed, threads);
      },
      py::arg("model"), py::arg("thresholds"), py::arg("epsilons"), py::arg("method"),
      py::arg("tilt") = nullptr, py::arg("replications") = 10000, py::arg("seed") = 0,
      py::arg("threads") = 1);
}
