#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/campaign.hpp"
#include "beamtime/event_bus.hpp"
#include "beamtime/facility.hpp"
#include "beamtime/metrics.hpp"
#include "beamtime/results_store.hpp"
#include "beamtime/scheduler.hpp"
#include "beamtime/worker_pool.hpp"

namespace beamtime {

struct OrchestratorConfig {
  std::array<StageProfile, 4> profiles = default_profiles();
  std::array<int, 4> stage_nodes{28, 28, 2, 2};
  int ranks_per_node = 32;
  /// Multiplies stage_nodes (at least one node per job).
  double node_scale = 1.0;
  Target target = Target::batch();
  /// Live (new-data) jobs jump ahead of reprocessing jobs in the shared queue.
  bool live_priority = false;
  double heartbeat_s = 10.0;
  IoMode io_mode = IoMode::burst_buffer;
  double shared_open_s = 0.05;
  int group_size = 10;
  FlushPolicy flush{};
  DbCost db{};
  std::uint64_t seed = 0;
  /// Cancel still-pending jobs of a trial when a newer trial supersedes it.
  bool cancel_superseded = false;
  /// Chaining stops after this stage.
  Stage last_stage = Stage::integration;
};

struct JobSpec {
  JobId job_id = -1;
  Stage stage = Stage::spotfinding;
  DatasetId dataset_id = 0;
  TrialId trial_id = 0;
  RunId run_id = 0;
  int nodes = 1;
  int ranks_per_node = 32;
  std::vector<ImageRef> input;
  bool reprocess = false;
  /// Job whose survivors feed this one.
  std::optional<JobId> upstream;
  /// First attempt of this (run, trial, stage) unit.
  JobId lineage = -1;
  Target target;

  int ranks() const { return nodes * ranks_per_node; }
};

nlohmann::json to_json(const JobSpec& s);

struct TurnaroundSample {
  std::string image_id;
  SimTime recorded_at{};
  SimTime first_processed_at{};
  double delta_s = 0.0;
};

struct TurnaroundReport {
  std::vector<TurnaroundSample> samples;
  Histogram histogram;  // one-minute bins over delta
  double min_s = 0.0;
  double median_s = 0.0;
  double mean_s = 0.0;
  double max_s = 0.0;
  /// Share of samples with delta in [10, 20) minutes.
  double band_10_20 = 0.0;
};

nlohmann::json to_json(const TurnaroundReport& r, bool with_samples = false);

/// Watches runs, campaign changes and job states; submits stage jobs and chains them.
class Orchestrator {
 public:
  Orchestrator(Kernel& kernel, EventBus& bus, Facility& facility, Campaign& campaign, Scheduler& scheduler, Store& store,
               OrchestratorConfig config);

  Orchestrator(const Orchestrator&) = delete;
  Orchestrator& operator=(const Orchestrator&) = delete;

  /// Hooks bus and scheduler notifications and starts the heartbeat.
  void start();

  /// Submits every uncovered (run, trial) spotfinding job and every pending successor stage.
  /// Idempotent: a second call without new inputs returns nothing.
  std::vector<JobSpec> sync_cycle();

  /// Spotfinding jobs for all available runs the trial selects, oldest run first.
  std::vector<JobSpec> on_trial_created(TrialId trial);

  /// Operator-requested job for one run outside the automatic plan. Throws UnknownRun,
  /// UnknownTrial, InvalidState (run not yet at the remote site), NodesExceedPool.
  JobSpec submit_manual(Stage stage, DatasetId dataset, TrialId trial, RunId run, int nodes, Target target);

  /// Records committed so far by one job.
  StageCounts job_committed(JobId id) const;

  /// Throws EmptyResult when nothing has been processed yet.
  TurnaroundReport turnaround_report() const;

  nlohmann::json snapshot() const;

  const std::map<JobId, JobSpec>& specs() const noexcept { return specs_; }
  const JobSpec& spec(JobId id) const;
  /// Present once the job has started (timestamps in scenario time).
  const JobResult* result(JobId id) const;
  std::vector<JobId> job_ids() const;
  /// Stage at which a (run, trial) ran out of survivors.
  std::optional<Stage> exhausted(RunId run, TrialId trial) const;

  bool live_priority() const noexcept { return config_.live_priority; }
  void set_live_priority(bool on) { config_.live_priority = on; }
  const OrchestratorConfig& config() const noexcept { return config_; }

  /// Rank-seconds blocked on store flushes and total consumer rank-seconds of finished jobs.
  double db_time_s() const noexcept { return db_time_s_; }
  double rank_seconds() const noexcept { return rank_seconds_; }

 private:
  struct Lineage {
    std::vector<ImageRef> survivors;
    std::set<std::int64_t> committed;  // image indices with a committed record
    bool finished = false;
  };
  struct Live {
    std::vector<std::optional<Connection>> conns;
    std::vector<EventHandle> handles;
    std::vector<bool> committed;
    std::unordered_map<std::int64_t, std::size_t> trace_of;  // image index -> trace
  };

  JobSpec& submit(JobSpec spec, std::optional<JobId> resubmit_of = std::nullopt);
  StageProfile profile_for(Stage stage, TrialId trial) const;
  int nodes_for(Stage stage, TrialId trial, int upstream_nodes) const;
  void plan_trial(TrialId trial, std::vector<JobSpec>& out);
  void chain(JobId id, std::vector<JobSpec>& out);
  void request_sync();
  void heartbeat();
  void on_job_change(JobId id, JobState state);
  void on_started(JobSpec& spec);
  void on_finished(JobSpec& spec, JobState state);
  void commit_flush(JobId id, std::size_t flush);
  void note_turnaround(const JobResult& r, SimTime until);
  nlohmann::json committed_counts(JobId id) const;

  Kernel& kernel_;
  EventBus& bus_;
  Facility& facility_;
  Campaign& campaign_;
  Scheduler& scheduler_;
  Store& store_;
  OrchestratorConfig config_;

  std::map<JobId, JobSpec> specs_;
  std::map<JobId, JobResult> planned_;  // computed at submit, relative to the epoch
  std::map<JobId, JobResult> results_;
  std::map<JobId, Live> live_;
  std::map<JobId, Lineage> lineages_;
  std::map<std::pair<RunId, TrialId>, DatasetId> covered_;
  std::set<JobId> chain_ready_;
  std::set<JobId> chained_;
  std::map<std::pair<RunId, TrialId>, Stage> exhausted_;
  std::map<std::pair<RunId, std::int64_t>, std::pair<SimTime, SimTime>> first_processed_;
  std::map<JobId, StageCounts> job_counts_;
  double db_time_s_ = 0.0;
  double rank_seconds_ = 0.0;
  bool started_ = false;
  bool sync_scheduled_ = false;
};

}  // namespace beamtime
