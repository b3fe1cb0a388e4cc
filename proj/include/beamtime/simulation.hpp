#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/campaign.hpp"
#include "beamtime/data_mover.hpp"
#include "beamtime/event_bus.hpp"
#include "beamtime/facility.hpp"
#include "beamtime/orchestrator.hpp"
#include "beamtime/results_store.hpp"
#include "beamtime/scheduler.hpp"
#include "beamtime/sim_kernel.hpp"
#include "beamtime/status_board.hpp"

namespace beamtime {

struct ShiftConfig {
  int runs = 6;
  double rate_hz = 40.0;
  double duration_s = 900.0;
  double gap_s = 300.0;
  double start_s = 0.0;
  /// Applied to every run when it concludes.
  std::vector<std::string> tags{"shift"};
};

struct TagEventConfig {
  double at_s = 0.0;
  RunId run = 0;
  std::vector<std::string> tags;
};

struct TrialEventConfig {
  double at_s = 0.0;
  nlohmann::json params;
};

struct DatasetConfig {
  std::string name;
  TagExpr expr;
};

struct StatusEventConfig {
  double at_s = 0.0;
  std::string resource;
  Health status = Health::active;
};

struct OutageConfig {
  std::string resource;
  double start_s = 0.0;
  double end_s = 0.0;
  std::string description;
};

struct ReservationConfig {
  int nodes = 1;
  double start_s = 0.0;
  std::optional<double> end_s;  // default: the horizon
  double grace_s = 60.0;
};

/// Synthetic non-experiment load on the pool.
struct BackgroundJobConfig {
  double at_s = 0.0;
  int count = 1;
  double every_s = 0.0;
  int nodes = 1;
  double duration_s = 60.0;
  TargetKind kind = TargetKind::batch;
  int reservation = 0;
  std::optional<double> exit_after_warning_s;
};

struct ApiConfig {
  std::string token = "beamtime-dev-token";
  std::string center = "nersc-sim";
  std::string machine = "cori";
  double allocation_node_hours = 50000.0;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::uint64_t seed = 1;
  std::optional<double> horizon_s;
  /// Time simulated after the last run ends when no horizon is given.
  double drain_s = 1800.0;
  std::string epoch_iso = "2020-09-18T08:00:00";
  FacilityConfig facility;
  ShiftConfig shift;
  MoverConfig mover;
  SchedulerConfig pool;
  std::vector<ReservationConfig> reservations;
  OrchestratorConfig orchestrator;
  /// Index into `reservations` for pipeline jobs; unset means the batch queue.
  std::optional<int> pipeline_reservation;
  std::vector<DatasetConfig> datasets;
  std::vector<TrialEventConfig> trials;
  std::vector<TagEventConfig> tags;
  std::vector<StatusEventConfig> status_events;
  std::vector<OutageConfig> outages;
  std::vector<BackgroundJobConfig> background;
  bool strict_topics = true;
  ApiConfig api;
  nlohmann::json source;  // the document this was parsed from
};

/// Throws ConfigError whose pointer names the offending key.
ScenarioConfig parse_scenario(const nlohmann::json& doc);
/// Throws ConfigError (pointer "" for unreadable or malformed files).
ScenarioConfig load_scenario(const std::filesystem::path& file);
/// Bundled scenario by name ("lv95-shift", "p175-day", "bad-io-day", "fig8-backlog").
std::optional<std::filesystem::path> bundled_scenario(const std::string& name);
std::vector<std::string> bundled_scenario_names();

/// Owns one simulated facility, link, compute center and pipeline.
class Simulation {
 public:
  /// `persist_dir` keeps event logs, the mover queue and the store WAL on disk; it is
  /// cleared first so every run starts from an empty state.
  explicit Simulation(ScenarioConfig config, std::optional<std::filesystem::path> persist_dir = std::nullopt);
  ~Simulation();

  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  SimTime horizon() const noexcept { return horizon_; }
  /// Advances the kernel; callers outside the kernel thread must hold `mutex()` exclusively.
  std::size_t run_until(SimTime t);
  std::size_t run() { return run_until(horizon_); }

  nlohmann::json summary() const;
  nlohmann::json snapshot() const { return orchestrator_->snapshot(); }
  /// Event log, traces, reports, snapshot and summary under `out`.
  void write_artifacts(const std::filesystem::path& out) const;

  const ScenarioConfig& config() const noexcept { return config_; }
  Kernel& kernel() noexcept { return kernel_; }
  EventBus& bus() noexcept { return *bus_; }
  StatusBoard& status() noexcept { return status_; }
  Facility& facility() noexcept { return *facility_; }
  DataMover& mover() noexcept { return *mover_; }
  Campaign& campaign() noexcept { return *campaign_; }
  Scheduler& scheduler() noexcept { return *scheduler_; }
  Store& store() noexcept { return *store_; }
  Orchestrator& orchestrator() noexcept { return *orchestrator_; }
  const Kernel& kernel() const noexcept { return kernel_; }
  const EventBus& bus() const noexcept { return *bus_; }
  const StatusBoard& status() const noexcept { return status_; }
  const Facility& facility() const noexcept { return *facility_; }
  const DataMover& mover() const noexcept { return *mover_; }
  const Campaign& campaign() const noexcept { return *campaign_; }
  const Scheduler& scheduler() const noexcept { return *scheduler_; }
  const Store& store() const noexcept { return *store_; }
  const Orchestrator& orchestrator() const noexcept { return *orchestrator_; }
  std::shared_mutex& mutex() const noexcept { return mutex_; }
  std::optional<std::filesystem::path> persist_dir() const { return persist_dir_; }

 private:
  void install();

  ScenarioConfig config_;
  std::optional<std::filesystem::path> persist_dir_;
  SimTime horizon_{};
  Kernel kernel_;
  StatusBoard status_;
  std::unique_ptr<EventBus> bus_;
  std::unique_ptr<Facility> facility_;
  std::unique_ptr<DataMover> mover_;
  std::unique_ptr<Campaign> campaign_;
  std::unique_ptr<Scheduler> scheduler_;
  std::unique_ptr<Store> store_;
  std::unique_ptr<Orchestrator> orchestrator_;
  mutable std::shared_mutex mutex_;
};

/// Runs a scenario and writes artifacts into `out_dir`. Returns the summary.
nlohmann::json run_scenario(const ScenarioConfig& config, const std::filesystem::path& out_dir);

/// Folds bus events (already merged across topics) into the snapshot document the live
/// orchestrator produces.
nlohmann::json replay_events(const std::vector<BusEvent>& events);
/// Accepts an events directory (one `<topic>.log` per topic) or a single topic log.
/// Throws CorruptLog with the offending line number.
nlohmann::json replay(const std::filesystem::path& log);
/// Stable merge of per-topic logs: by time, then topic, then offset.
std::vector<BusEvent> merge_topics(std::vector<std::vector<BusEvent>> per_topic);

}  // namespace beamtime
