#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/event_bus.hpp"
#include "beamtime/facility.hpp"
#include "beamtime/sim_kernel.hpp"
#include "beamtime/status_board.hpp"

namespace beamtime {

struct DegradationStep {
  SimTime from{};
  double factor = 1.0;
};

/// Shaped link. The degradation schedule is piecewise constant; before the first step the
/// factor is 1. Each of the `parallel_streams` transfer slots gets an equal share.
struct LinkProfile {
  double nominal_rate = 2.6e9;  // bytes/s
  std::vector<DegradationStep> degradation;
  double per_file_latency_s = 0.0;
  int parallel_streams = 1;

  void validate() const;
  double factor_at(SimTime t) const;
  double effective_rate(SimTime t) const { return nominal_rate / factor_at(t); }
  double stream_rate(SimTime t) const { return effective_rate(t) / parallel_streams; }
  /// End of the data phase for `bytes` starting at `data_start` on one stream.
  SimTime finish_time(SimTime data_start, std::int64_t bytes) const;
  /// Bytes one stream moves in [a, b].
  double stream_bytes_between(SimTime a, SimTime b) const;
};

nlohmann::json to_json(const LinkProfile& link);
/// Keys: nominal_rate, per_file_latency_s, parallel_streams, degradation [{from_s, factor}].
LinkProfile link_from_json(const nlohmann::json& j);

struct TransferQueueEntry {
  RunId run_id = 0;
  std::vector<FileAsset> files;
  SimTime enqueued_at{};
  bool concluded = false;
  SimTime concluded_at{};
  std::uint64_t conclude_seq = 0;
};

struct Assignment {
  RunId run_id = 0;
  FileAsset file;
  int attempt = 1;
};

enum class TransferOutcome { completed, faulted, aborted };

struct TransferRecord {
  FileAsset file;
  SimTime start{};
  SimTime end{};
  std::int64_t bytes = 0;  // bytes that actually crossed the link
  double effective_rate = 0.0;
  int attempt = 1;
  TransferOutcome outcome = TransferOutcome::completed;
};

struct MoverConfig {
  int max_parallel = 1;
  LinkProfile link;
  double retry_base_s = 10.0;
  double retry_factor = 2.0;
  int max_attempts = 5;
  double fault_probability = 0.0;
  /// Every listed resource must be "active" for dispatch to proceed.
  std::vector<std::string> destination_resources{"dtns", "scratch"};
  std::optional<std::filesystem::path> queue_file;
};

/// Event-driven, run-ordered transfer engine.
class DataMover {
 public:
  DataMover(Kernel& kernel, EventBus& bus, StatusBoard* status, MoverConfig config, std::uint64_t seed);

  DataMover(const DataMover&) = delete;
  DataMover& operator=(const DataMover&) = delete;

  /// Returns the number of files newly queued. Unknown kinds are ignored.
  std::size_t on_event(const BusEvent& event);

  /// Hands out up to `max_parallel - active` files from the oldest concluded runs.
  /// Throws DestinationUnavailable (queue untouched) when the destination is not active.
  std::vector<Assignment> dispatch(int max_parallel);

  /// Pure timing model for one file starting at `start`.
  static TransferRecord execute_transfer(const Assignment& assignment, const LinkProfile& link, SimTime start);

  /// Subscribes to the runs topic and status changes and starts moving data on the kernel.
  void start();

  /// Aggregate transfer rate per bin in bytes/s, from epoch to the last transfer end.
  std::vector<double> throughput_series(double bin_s) const;

  const std::vector<TransferRecord>& records() const noexcept { return records_; }
  std::vector<TransferQueueEntry> queue() const;
  /// Concluded runs not yet fully transferred.
  std::size_t backlog_depth() const;
  std::size_t active_transfers() const noexcept { return active_.size(); }
  std::int64_t bytes_delivered(RunId run) const;
  std::optional<SimTime> run_completed_at(RunId run) const;
  std::optional<SimTime> run_concluded_at(RunId run) const;
  bool run_failed(RunId run) const { return failed_runs_.contains(run); }

  /// Forces the next `count` attempts on `path` to fail.
  void inject_faults(const std::string& path, int count) { forced_faults_[path] += count; }

  const MoverConfig& config() const noexcept { return config_; }

 private:
  enum class FileState { pending, active, done, failed };
  struct FileProgress {
    FileState state = FileState::pending;
    int attempts = 0;
    SimTime eligible_at{};
  };
  struct Active {
    Assignment assignment;
    TransferRecord planned;
    EventHandle completion;
  };

  bool destination_active() const;
  void journal(EventKind kind, const nlohmann::json& payload, SimTime at);
  void load_journal();
  void request_pump();
  void pump();
  void complete(const std::string& path);
  void abort_active();
  bool add_file(const FileAsset& f);

  Kernel& kernel_;
  EventBus& bus_;
  StatusBoard* status_;
  MoverConfig config_;
  std::uint64_t seed_;

  std::map<RunId, TransferQueueEntry> entries_;
  std::map<std::string, FileProgress> progress_;
  std::map<std::string, Active> active_;
  std::set<RunId> completed_runs_;
  std::set<RunId> failed_runs_;
  std::map<RunId, SimTime> completed_at_;
  std::map<std::string, int> forced_faults_;
  std::vector<TransferRecord> records_;
  std::uint64_t next_conclude_seq_ = 0;
  std::int64_t journal_offset_ = 0;
  bool replaying_ = false;

  bool started_ = false;
  bool pump_scheduled_ = false;
  std::optional<Cursor> cursor_;
};

}  // namespace beamtime
