#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/sim_kernel.hpp"
#include "beamtime/stage.hpp"

namespace beamtime {

using ReservationId = std::int64_t;

enum class TargetKind { reservation, preemptible, batch };

struct Target {
  TargetKind kind = TargetKind::batch;
  ReservationId reservation = -1;

  static Target batch() { return {TargetKind::batch, -1}; }
  static Target urgent(ReservationId r) { return {TargetKind::reservation, r}; }
  static Target preemptible(ReservationId r) { return {TargetKind::preemptible, r}; }
  friend bool operator==(const Target&, const Target&) = default;
};

enum class JobState { pending, running, preempt_warned, preempted, done, failed };

std::string_view to_string(TargetKind k);
std::string_view to_string(JobState s);
JobState parse_job_state(std::string_view s);
TargetKind parse_target_kind(std::string_view s);

struct JobRequest {
  int nodes = 1;
  Target target;
  /// Runtime once started.
  double duration_s = 0.0;
  /// Delay between the warning signal and a voluntary save-and-quit; unset means the job
  /// ignores the signal and is killed when the grace period ends.
  std::optional<double> exit_after_warning_s;
  /// Higher runs first within a target; FIFO among equals.
  int priority = 0;
  std::string label;
};

struct SchedJob {
  JobId id = 0;
  JobRequest request;
  JobState state = JobState::pending;
  SimTime submit{};
  std::optional<SimTime> start;
  std::optional<SimTime> end;
  std::optional<SimTime> warned_at;
  bool killed = false;
  std::vector<int> nodes;
  std::optional<JobId> resubmit_of;
  std::optional<JobId> resubmitted_as;
  std::uint64_t fifo_seq = 0;
};

struct Reservation {
  ReservationId id = 0;
  int node_count = 0;
  SimTime t0{};
  SimTime t1{};
  double grace_s = 60.0;
  std::vector<int> nodes;

  bool active_at(SimTime t) const { return t0 <= t && t < t1; }
};

enum class DecisionKind { start, warn, kill, voluntary_exit, complete, expire };
std::string_view to_string(DecisionKind k);

struct Decision {
  DecisionKind kind;
  JobId job;
  SimTime at;
};

struct Allocation {
  JobId job;
  int node;
  TargetKind kind;
  SimTime start;
  SimTime end;
};

struct UtilizationSeries {
  double bin_s = 0.0;
  std::vector<double> reservation;
  std::vector<double> preemptible;
  std::vector<double> batch;

  double total(std::size_t bin) const { return reservation[bin] + preemptible[bin] + batch[bin]; }
};

struct SchedulerConfig {
  int total_nodes = 64;
  double default_grace_s = 60.0;
  bool auto_requeue = true;
};

/// Node pool with reservation windows, preemptible backfill and a batch queue. All state
/// changes happen on kernel events; `tick` is coalesced to one call per instant.
class Scheduler {
 public:
  using Listener = std::function<void(const SchedJob& job, JobState previous)>;

  Scheduler(Kernel& kernel, SchedulerConfig config = {});

  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;

  /// Throws ValidationError or CapacityExceeded.
  ReservationId create_reservation(int node_count, SimTime t0, SimTime t1, std::optional<double> grace_s = {});

  /// Throws UnknownReservation, NodesExceedPool or ValidationError.
  JobId submit(JobRequest request);

  /// Submits `request` as the continuation of a preempted or expired job.
  JobId resubmit(JobId previous, JobRequest request);

  /// Applies scheduling decisions at kernel.now().
  std::vector<Decision> tick();

  /// Cancels a pending job (state -> failed). Returns false if it was not pending.
  bool cancel(JobId id);

  const SchedJob& job(JobId id) const;
  const std::map<JobId, SchedJob>& jobs() const noexcept { return jobs_; }
  const std::map<ReservationId, Reservation>& reservations() const noexcept { return reservations_; }
  const std::vector<Decision>& decisions() const noexcept { return log_; }
  /// Closed allocation intervals plus open ones truncated at now().
  std::vector<Allocation> allocations() const;
  int total_nodes() const noexcept { return config_.total_nodes; }
  int nodes_in_use() const;
  std::size_t pending_count() const;
  std::size_t running_count() const;

  UtilizationSeries utilization_series(double bin_s) const;

  void add_listener(Listener listener) { listeners_.push_back(std::move(listener)); }

 private:
  struct Timers {
    std::optional<EventHandle> completion;
    std::optional<EventHandle> kill;
    std::optional<EventHandle> voluntary;
  };

  void request_tick();
  void set_state(SchedJob& job, JobState next);
  void start_job(SchedJob& job, std::vector<int> nodes, std::vector<Decision>& out);
  void finish_job(JobId id, JobState final_state, DecisionKind why);
  void warn_job(SchedJob& job, double grace_s, std::vector<Decision>& out);
  bool node_reserved_during(int node, SimTime from, SimTime to) const;
  std::vector<const SchedJob*> pending_for(TargetKind kind, ReservationId r) const;

  Kernel& kernel_;
  SchedulerConfig config_;
  std::map<ReservationId, Reservation> reservations_;
  std::map<JobId, SchedJob> jobs_;
  std::map<JobId, Timers> timers_;
  std::vector<std::optional<JobId>> node_owner_;
  std::vector<Allocation> closed_;
  std::vector<Decision> log_;
  std::vector<Listener> listeners_;
  JobId next_job_ = 0;
  ReservationId next_reservation_ = 0;
  std::uint64_t next_fifo_ = 0;
  bool tick_scheduled_ = false;
};

}  // namespace beamtime
