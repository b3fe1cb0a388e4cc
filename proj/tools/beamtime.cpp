// beamtime: scenario runner, API server, report generator and log replayer.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "beamtime/api.hpp"
#include "beamtime/errors.hpp"
#include "beamtime/metrics.hpp"
#include "beamtime/simulation.hpp"
#include "beamtime/worker_pool.hpp"

namespace fs = std::filesystem;
using namespace beamtime;

namespace {

// Exit codes for `run`.
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

httplib::Server* g_server = nullptr;
std::atomic<bool> g_stop{false};

void on_signal(int) {
  g_stop = true;
  if (g_server) g_server->stop();
}

ScenarioConfig load_config(const std::string& arg) {
  if (fs::exists(arg)) return load_scenario(arg);
  if (auto p = bundled_scenario(arg)) return load_scenario(*p);
  throw ConfigError("", "no config file or bundled scenario named '" + arg + "'");
}

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

int cmd_run(const std::string& cfg, const std::string& out) {
  ScenarioConfig config;
  try {
    config = load_config(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  try {
    const auto summary = run_scenario(config, out);
    std::cout << summary.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}

int cmd_serve(const std::string& cfg, const std::string& addr, double timescale, const std::string& out,
              const std::string& ui, double wall_limit_s) {
  ScenarioConfig config;
  try {
    config = load_config(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  if (!(timescale > 0)) {
    std::cerr << "--timescale must be > 0\n";
    return kConfigError;
  }
  const auto [host, port] = parse_addr(addr);
  std::optional<fs::path> ui_dir;
  if (!ui.empty()) ui_dir = fs::path(ui);
  else if (fs::exists(fs::path(BEAMTIME_UI_DIR) / "index.html")) ui_dir = fs::path(BEAMTIME_UI_DIR);

  Simulation sim(config, fs::path(out));
  ApiService api(sim, out, ui_dir);
  httplib::Server server;
  mount(server, api);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  std::jthread driver([&](std::stop_token stop) {
    RealtimeDriver rt(sim.kernel(), 1.0 / timescale, [&](const std::function<void()>& step) {
      std::unique_lock lock(sim.mutex());
      step();
      api.refresh_tasks();
    });
    rt.run(sim.horizon(), stop, std::chrono::milliseconds(static_cast<long>(std::max(1.0, 200.0 * timescale))));
    if (stop.stop_requested()) return;
    std::shared_lock lock(sim.mutex());
    sim.write_artifacts(out);
    std::cerr << "scenario reached its horizon; artifacts in " << out << "\n";
  });
  std::jthread limiter;
  if (wall_limit_s > 0)
    limiter = std::jthread([&](std::stop_token stop) {
      const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(wall_limit_s);
      while (!stop.stop_requested() && !g_stop && std::chrono::steady_clock::now() < until)
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      server.stop();
    });

  std::cerr << "serving on " << host << ":" << port << " (timescale " << timescale << ")\n";
  if (!server.listen(host, port)) {
    std::cerr << "cannot listen on " << addr << "\n";
    driver.request_stop();
    return kRuntimeError;
  }
  driver.request_stop();
  return 0;
}

int cmd_report(const std::string& run_dir, std::int64_t job, bool weather, bool pdf, bool scaling,
               const std::string& out) {
  ScenarioConfig config;
  try {
    config = load_scenario(fs::path(run_dir) / "scenario.json");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }
  try {
    // Runs are deterministic, so the job is rebuilt rather than parsed back from traces.
    Simulation sim(config);
    sim.run();
    const auto* r = sim.orchestrator().result(job);
    if (!r) {
      std::cerr << "job " << job << " never started in " << run_dir << "\n";
      return kRuntimeError;
    }
    const fs::path dir(out);
    const auto base = std::to_string(job);
    if (!weather && !pdf && !scaling) weather = pdf = scaling = true;
    if (weather) {
      const auto doc = weather_plot(*r);
      write(dir / (base + ".weather.csv"), timeline_csv(doc));
      write(dir / (base + ".weather.svg"), timeline_svg(doc));
    }
    if (pdf) {
      const auto h = duration_pdf(r->traces, r->stage, 0.1);
      const std::string name(to_string(r->stage));
      write(dir / (base + ".pdf.csv"), histogram_csv(h, "duration_s"));
      write(dir / (base + ".pdf.svg"), histogram_svg(h, name + " time per image", "seconds", stage_color(r->stage)));
    }
    if (scaling) {
      const auto& spec = sim.orchestrator().spec(job);
      const auto& profile = sim.config().orchestrator.profiles[stage_index(spec.stage)];
      std::vector<JobResult> runs;
      for (int ranks : {8, 64, 512}) {
        PoolOptions opt;
        opt.job_id = job;
        opt.trial = spec.trial_id;
        opt.seed = sim.config().seed;
        runs.push_back(run_stage_job(spec.input, ranks, profile, opt));
      }
      const auto rows = scaling_summary(runs);
      write(dir / (base + ".scaling.csv"), scaling_csv(rows));
      write(dir / (base + ".scaling.svg"), scaling_svg(rows));
    }
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}

int cmd_replay(const std::string& log) {
  try {
    std::cout << replay(log).dump(2) << "\n";
  } catch (const CorruptLog& e) {
    std::cerr << "corrupt log: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "replay failed: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}

int cmd_mover(const std::string& events, const std::string& cfg) {
  try {
    ScenarioConfig config;
    if (!cfg.empty()) config = load_config(cfg);
    Kernel kernel;
    EventBus bus(EventBus::Options{});
    DataMover mover(kernel, bus, nullptr, config.mover, config.seed);
    mover.start();
    for (const auto& ev : read_log(events, std::string(topics::runs)))
      kernel.schedule(ev.time, "replay run event",
                      [&bus, ev] { bus.publish(std::string(topics::runs), ev.kind, ev.payload, ev.time); });
    while (auto t = kernel.next_event_time()) kernel.run_until(*t);
    for (const auto& rec : mover.records())
      std::cout << nlohmann::json{{"path", rec.file.path},
                                  {"run", rec.file.run_id},
                                  {"start_ns", to_ns(rec.start)},
                                  {"end_ns", to_ns(rec.end)},
                                  {"bytes", rec.bytes},
                                  {"attempt", rec.attempt}}
                       .dump()
                << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "mover failed: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beamtime: beamline-to-HPC pipeline simulator"};
  app.require_subcommand(1);

  std::string cfg, out = "out", addr = ":8080", ui, log, run_dir, events;
  double timescale = 60.0, wall_limit = 0.0;
  std::int64_t job = 0;
  bool weather = false, pdf = false, scaling = false;

  auto* run = app.add_subcommand("run", "run a scenario to its horizon and write artifacts");
  run->add_option("config", cfg, "scenario file or bundled name")->required();
  run->add_option("--out", out, "output directory");

  auto* serve = app.add_subcommand("serve", "run a scenario against the wall clock and serve the API");
  serve->add_option("config", cfg, "scenario file or bundled name")->required();
  serve->add_option("--addr", addr, "host:port or :port");
  serve->add_option("--timescale", timescale, "simulated seconds per wall second");
  serve->add_option("--out", out, "directory for logs, store and artifacts");
  serve->add_option("--ui", ui, "directory of console assets served under /ui/");
  serve->add_option("--wall-limit", wall_limit, "stop serving after this many wall seconds");

  auto* report = app.add_subcommand("report", "render plots for one job of a finished run");
  report->add_option("run_dir", run_dir, "output directory of `beamtime run`")->required();
  report->add_option("--job", job, "job id")->required();
  report->add_flag("--weather", weather, "per-rank timeline");
  report->add_flag("--pdf", pdf, "time-per-image distribution");
  report->add_flag("--scaling", scaling, "weak scaling over 8, 64 and 512 ranks");
  report->add_option("--out", out, "output directory");

  auto* rep = app.add_subcommand("replay", "rebuild the final state from an event log");
  rep->add_option("log", log, "events directory or a single topic log")->required();

  auto* mover = app.add_subcommand("mover", "run the transfer engine over a recorded runs log");
  mover->add_option("--events", events, "runs topic log")->required();
  mover->add_option("--config", cfg, "scenario supplying link and mover settings");

  CLI11_PARSE(app, argc, argv);

  if (*run) return cmd_run(cfg, out);
  if (*serve) return cmd_serve(cfg, addr, timescale, out, ui, wall_limit);
  if (*report) return cmd_report(run_dir, job, weather, pdf, scaling, out);
  if (*rep) return cmd_replay(log);
  if (*mover) return cmd_mover(events, cfg);
  return 0;
}
