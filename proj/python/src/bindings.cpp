#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dgsc/checkpoint_io.hpp"
#include "dgsc/cli.hpp"
#include "dgsc/config.hpp"
#include "dgsc/errors.hpp"
#include "dgsc/geometry.hpp"
#include "dgsc/potentials.hpp"
#include "dgsc/sgld.hpp"
#include "dgsc/trainer.hpp"
#include "dgsc/transformer.hpp"

namespace py = pybind11;
using namespace dgsc;

namespace {

py::dict estimate_dict(const LlcEstimate& e) {
  py::dict d;
  d["lambda_hat"] = e.lambda_hat;
  d["lambda_std"] = e.lambda_std;
  d["per_chain"] = e.per_chain;
  d["init_loss"] = e.init_loss;
  d["flags"] = flag_names(e.flags);
  return d;
}

LlcCurve make_curve(const std::vector<std::uint64_t>& steps, const std::vector<double>& lambdas,
                    const std::vector<double>& stds) {
  if (steps.size() != lambdas.size() || steps.size() != stds.size())
    throw ConfigError("steps, lambdas and stds must have equal length");
  LlcCurve c;
  for (std::size_t i = 0; i < steps.size(); ++i) c.points.push_back({steps[i], lambdas[i], stds[i], NAN});
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Local learning coefficient estimation and stage analysis";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<EstimationError>(m, "EstimationError", PyExc_RuntimeError);

  py::class_<SgldConfig>(m, "SgldConfig")
      .def(py::init<>())
      .def_readwrite("epsilon", &SgldConfig::epsilon)
      .def_readwrite("gamma", &SgldConfig::gamma)
      .def_readwrite("nbeta", &SgldConfig::nbeta)
      .def_readwrite("chains", &SgldConfig::chains)
      .def_readwrite("steps", &SgldConfig::steps)
      .def_readwrite("burn_in", &SgldConfig::burn_in)
      .def_readwrite("batch_size", &SgldConfig::batch_size)
      .def_readwrite("dataset_size", &SgldConfig::dataset_size)
      .def_readwrite("seed", &SgldConfig::seed)
      .def_property_readonly("beta_tilde", &SgldConfig::beta_tilde)
      .def_property_readonly("gamma_tilde", &SgldConfig::gamma_tilde);

  m.def("potential_sgld_config", &potential_sgld_config, py::arg("dim"), py::arg("seed") = 0);

  m.def("potential_names", [] {
    std::vector<std::string> out;
    for (const auto& p : builtin_potentials()) out.push_back(p.name());
    return out;
  });
  m.def(
      "known_llc",
      [](const std::string& name) {
        const Rational r = potential_by_name(name).known_llc();
        return py::make_tuple(r.num, r.den);
      },
      py::arg("name"), "Known learning coefficient as (numerator, denominator).");
  m.def(
      "potential_value",
      [](const std::string& name, const std::vector<double>& w) { return potential_by_name(name).eval(w); },
      py::arg("name"), py::arg("w"));
  m.def(
      "potential_grad",
      [](const std::string& name, const std::vector<double>& w) { return potential_by_name(name).grad(w); },
      py::arg("name"), py::arg("w"));

  m.def(
      "estimate_llc_potential",
      [](const std::string& name, std::optional<SgldConfig> cfg) {
        const AnalyticPotential p = potential_by_name(name);
        const SgldConfig c = cfg ? *cfg : potential_sgld_config(p.dim(), 0);
        LlcEstimate e;
        {
          py::gil_scoped_release release;
          e = estimate_llc(*as_loss_model(p, 1), p.reference_point(), c, NullBatchSource{});
        }
        return estimate_dict(e);
      },
      py::arg("name"), py::arg("config") = py::none(),
      "SGLD estimate of the learning coefficient at the potential's reference point.");

  m.def(
      "volume_llc",
      [](const std::string& name, std::uint64_t seed, double radius) {
        VolumeOptions o;
        o.seed = seed;
        o.ball_radius = radius;
        o.epsilons = log_grid(1e-6, 1e-2, 9);
        const VolumeFit f = volume_llc_oracle(potential_by_name(name), o);
        py::dict d;
        d["lambda"] = f.lambda;
        d["std_error"] = f.std_error;
        d["epsilons"] = f.epsilons;
        d["volumes"] = f.volumes;
        d["samples"] = f.samples;
        return d;
      },
      py::arg("name"), py::arg("seed") = 0, py::arg("radius") = 1.0);

  m.def(
      "online_trace",
      [](const std::vector<double>& losses, double nbeta, double init_loss) {
        return online_trace(losses, nbeta, init_loss);
      },
      py::arg("losses"), py::arg("nbeta"), py::arg("init_loss"));

  m.def(
      "hessian_stats_potential",
      [](const std::string& name) {
        const AnalyticPotential p = potential_by_name(name);
        const HessianStats h = hessian_stats(*as_loss_model(p, 1), p.reference_point(), DataBatch{});
        py::dict d;
        d["trace"] = h.trace;
        d["trace_stderr"] = h.trace_stderr;
        d["max_eigenvalue"] = h.max_eigenvalue;
        d["converged"] = h.converged;
        return d;
      },
      py::arg("name"));

  m.def(
      "free_energy_crossover",
      [](double loss1, double llc1, double loss2, double llc2) {
        const Crossover c = free_energy_crossover({loss1, llc1, "w1"}, {loss2, llc2, "w2"});
        return py::make_tuple(c.n_crit ? py::cast(*c.n_crit) : py::none(), to_string(c.dominance));
      },
      py::arg("loss1"), py::arg("llc1"), py::arg("loss2"), py::arg("llc2"));

  m.def("checkpoint_plan", &checkpoint_plan, py::arg("steps"), py::arg("n_linear") = 100, py::arg("n_log") = 90);

  m.def(
      "staircase_fixture",
      [](const std::vector<std::uint64_t>& steps, const std::vector<double>& plateaus, double height,
         double noise_std, std::uint64_t seed) {
        const LlcCurve c = staircase_fixture(steps, plateaus, height, noise_std, seed);
        std::vector<double> lam;
        for (const auto& p : c.points) lam.push_back(p.lambda_hat);
        return lam;
      },
      py::arg("steps"), py::arg("plateaus"), py::arg("height") = 10.0, py::arg("noise_std") = 0.03,
      py::arg("seed") = 0);

  m.def(
      "detect_boundaries",
      [](const std::vector<std::uint64_t>& steps, const std::vector<double>& lambdas,
         const std::vector<double>& stds, double tolerance) {
        const LlcCurve s = smooth_curve(make_curve(steps, lambdas, stds));
        py::list out;
        for (const auto& b : detect_boundaries(s, tolerance)) {
          py::dict d;
          d["t"] = b.t;
          d["index"] = b.index;
          d["kind"] = to_string(b.kind);
          d["derivative"] = b.derivative_value;
          out.append(d);
        }
        return out;
      },
      py::arg("steps"), py::arg("lambdas"), py::arg("stds"), py::arg("tolerance") = -1.0,
      "Smooths the curve over log10 t and returns its stage boundaries.");

  m.def(
      "parameter_count",
      [](int layers, int heads, int d_embed, int d_mlp, int dim, int max_examples) {
        TransformerConfig c;
        c.layers = layers;
        c.heads = heads;
        c.d_embed = d_embed;
        c.d_mlp = d_mlp;
        c.dim = dim;
        c.max_examples = max_examples;
        c.validate();
        return transformer_layout(c).size();
      },
      py::arg("layers") = 2, py::arg("heads") = 4, py::arg("d_embed") = 64, py::arg("d_mlp") = 64,
      py::arg("dim") = 4, py::arg("max_examples") = 8);

  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        const Checkpoint c = load_checkpoint(path);
        py::dict d;
        d["step"] = c.step;
        d["params"] = c.params;
        d["model_digest"] = digest_hex(c.model_digest);
        return d;
      },
      py::arg("path"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"dgsc"};
        full.insert(full.end(), args.begin(), args.end());
        py::gil_scoped_release release;
        return cli_main(full);
      },
      py::arg("args"), "Runs a dgsc subcommand in-process and returns its exit status.");
}
