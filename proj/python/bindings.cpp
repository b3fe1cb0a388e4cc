// Python module. Structured values cross the boundary as JSON text; the package wrapper decodes them.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <memory>
#include <mutex>

#include "beamtime/api.hpp"
#include "beamtime/errors.hpp"
#include "beamtime/metrics.hpp"
#include "beamtime/simulation.hpp"

namespace py = pybind11;
using namespace beamtime;
using nlohmann::json;

namespace {

py::exception<Error>* base_error = nullptr;
py::exception<ConfigError>* config_error = nullptr;

// Owns a simulation and the REST facade over it.
struct PySimulation {
  std::unique_ptr<Simulation> sim;
  std::unique_ptr<ApiService> api;

  PySimulation(const std::string& config, std::optional<std::filesystem::path> state_dir,
               const std::filesystem::path& files_root)
      : sim(std::make_unique<Simulation>(parse_scenario(json::parse(config)), std::move(state_dir))),
        api(std::make_unique<ApiService>(*sim, files_root)) {}

  std::size_t run_until(double t_s) {
    py::gil_scoped_release release;
    std::unique_lock lock(sim->mutex());
    return sim->run_until(at_seconds(t_s));
  }
  std::size_t run() { return run_until(to_seconds(sim->horizon())); }
  double now() const { return to_seconds(sim->kernel().now()); }
  std::string summary() const { return sim->summary().dump(); }
  std::string snapshot() const { return sim->snapshot().dump(); }

  py::tuple request(const std::string& method, const std::string& path, const std::string& body,
                    const std::string& token) {
    ApiRequest r;
    r.method = method;
    r.path = path;
    r.body = body;
    if (!token.empty()) r.headers["authorization"] = "Bearer " + token;
    ApiResponse resp;
    {
      py::gil_scoped_release release;
      resp = api->handle(r);
    }
    return py::make_tuple(resp.status, resp.content_type, py::bytes(resp.body));
  }
};

// One job per rank count over the same images; rows carry the scaling summary plus job totals.
std::string scaling(std::int64_t n_images, const std::vector<int>& ranks, const std::string& stage,
                    std::uint64_t seed, const std::string& io_mode) {
  std::vector<ImageRef> images;
  images.reserve(static_cast<std::size_t>(n_images));
  for (std::int64_t i = 0; i < n_images; ++i) images.push_back({1, i, 0, 0, kEpoch, 0});
  PoolOptions o;
  o.seed = seed;
  o.io_mode = io_mode == "shared" ? IoMode::shared : IoMode::burst_buffer;
  std::vector<JobResult> jobs;
  {
    py::gil_scoped_release release;
    for (int r : ranks) jobs.push_back(run_stage_job(images, r, default_profile(parse_stage(stage)), o));
  }
  const auto rows = scaling_summary(jobs);
  json out = json::array();
  for (const auto& row : rows) {
    const auto& job = *std::find_if(jobs.begin(), jobs.end(), [&](const JobResult& j) { return j.ranks == row.ranks; });
    out.push_back({{"stage", stage},
                   {"ranks", row.ranks},
                   {"images", row.images},
                   {"survivors", job.survivor_count()},
                   {"makespan_s", row.makespan_s},
                   {"mean_s", row.mean_s},
                   {"stddev_s", row.stddev_s},
                   {"groups", job.groups},
                   {"connection_high_water", job.connection_high_water}});
  }
  return out.dump();
}

}  // namespace

PYBIND11_MODULE(_beamtime, m) {
  m.doc() = "beamtime simulation core";

  // Leaked on purpose: the types live as long as the interpreter.
  base_error = new py::exception<Error>(m, "BeamtimeError", PyExc_RuntimeError);
  config_error = new py::exception<ConfigError>(m, "ConfigError", base_error->ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(*config_error, (e.pointer() + ": " + e.what()).c_str());
    } catch (const Error& e) {
      py::set_error(*base_error, e.what());
    }
  });

  m.def("bundled_scenarios", &bundled_scenario_names);
  m.def("bundled_scenario_path", [](const std::string& name) {
    const auto p = bundled_scenario(name);
    if (!p) throw py::key_error(name);
    return *p;
  });
  m.def("validate_scenario", [](const std::string& config) { parse_scenario(json::parse(config)); });
  m.def(
      "run_scenario",
      [](const std::string& config, const std::filesystem::path& out) {
        const auto cfg = parse_scenario(json::parse(config));
        py::gil_scoped_release release;
        return run_scenario(cfg, out).dump();
      },
      py::arg("config"), py::arg("out_dir"));
  m.def("replay", [](const std::filesystem::path& log) { return replay(log).dump(); });
  m.def("scaling", &scaling, py::arg("n_images"), py::arg("ranks"), py::arg("stage") = "spotfinding",
        py::arg("seed") = 1, py::arg("io_mode") = "burstbuffer");

  py::class_<PySimulation>(m, "Simulation")
      .def(py::init<const std::string&, std::optional<std::filesystem::path>, const std::filesystem::path&>(),
           py::arg("config"), py::arg("state_dir") = py::none(), py::arg("files_root") = ".")
      .def("run_until", &PySimulation::run_until, py::arg("t_s"))
      .def("run", &PySimulation::run)
      .def_property_readonly("now", &PySimulation::now)
      .def_property_readonly("token", [](const PySimulation& s) { return s.sim->config().api.token; })
      .def("summary", &PySimulation::summary)
      .def("snapshot", &PySimulation::snapshot)
      .def("request", &PySimulation::request, py::arg("method"), py::arg("path"), py::arg("body") = "",
           py::arg("token") = "");
}
