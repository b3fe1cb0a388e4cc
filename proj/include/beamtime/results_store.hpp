#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/facility.hpp"
#include "beamtime/sim_kernel.hpp"
#include "beamtime/stage.hpp"

namespace beamtime {

inline constexpr int kStoreSchemaVersion = 1;

struct ProgressRecord {
  std::int64_t id = -1;  // assigned on commit
  RunId run = 0;
  std::int64_t image_index = 0;
  TrialId trial = 0;
  Stage stage = Stage::spotfinding;
  Outcome outcome = Outcome::rejected;
  std::int32_t n_spots = 0;
  JobId job = -1;
  SimTime committed_at{};

  /// "<run>:<index>"
  std::string image_id() const;
  friend bool operator==(const ProgressRecord&, const ProgressRecord&) = default;
};

nlohmann::json to_json(const ProgressRecord& r);
ProgressRecord record_from_json(const nlohmann::json& j);

struct StageCounts {
  std::int64_t processed = 0;
  std::int64_t succeeded = 0;
  std::int64_t rejected = 0;
  std::int64_t spots = 0;

  friend bool operator==(const StageCounts&, const StageCounts&) = default;
};

struct ProgressFilter {
  std::optional<RunId> run;
  std::optional<TrialId> trial;
  std::optional<Stage> stage;
};

struct ProgressCounts {
  std::array<StageCounts, 4> stages{};
  std::int64_t records = 0;

  const StageCounts& at(Stage s) const { return stages[stage_index(s)]; }
  /// Spotfinding successes.
  std::int64_t n_spotfound() const { return at(Stage::spotfinding).succeeded; }
  std::int64_t n_indexed() const { return at(Stage::indexing).succeeded; }
  std::int64_t n_refined() const { return at(Stage::refinement).succeeded; }
  std::int64_t n_integrated() const { return at(Stage::integration).succeeded; }
  friend bool operator==(const ProgressCounts&, const ProgressCounts&) = default;
};

nlohmann::json to_json(const ProgressCounts& c);

struct CommitSeries {
  double bin_s = 0.0;
  std::vector<std::int64_t> transactions;
  std::vector<std::int64_t> records;
};

struct Connection {
  std::int64_t id = -1;
  SimTime opened{};
};

struct StoreOptions {
  /// WAL lives at `<dir>/store.wal`; empty keeps the log in memory.
  std::optional<std::filesystem::path> dir;
};

/// Embedded progress store. Every commit is one transaction written to a write-ahead log as
/// tab-separated lines
///   B <tx> <n>
///   R <json>      (n lines)
///   C <tx>
/// and becomes visible only once the C marker is written. Recovery ignores unterminated
/// transactions. Thread safe: commits serialize, readers see committed state only.
class Store {
 public:
  explicit Store(StoreOptions options = {});

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  /// Throws StoreUnavailable while the store is down.
  Connection connect(SimTime at);
  void close(const Connection& c);

  /// One transaction. Returns dense ids in input order. Throws DuplicateRecord (nothing
  /// committed), StoreUnavailable (down or injected crash; nothing visible).
  std::vector<std::int64_t> commit(const Connection& c, std::vector<ProgressRecord> records, SimTime at);

  /// The next commit writes `after_records` record lines and then fails as if the process died.
  void inject_crash(std::size_t after_records);
  void set_available(bool up);
  bool available() const;

  ProgressCounts query_progress(const ProgressFilter& filter = {}) const;
  CommitSeries commit_rate_series(double bin_s) const;
  std::vector<ProgressRecord> records() const;
  std::size_t size() const;
  bool contains(RunId run, std::int64_t image_index, TrialId trial, Stage stage) const;

  std::int64_t transactions() const;
  int open_connections() const;
  int connection_high_water() const;
  void reset_high_water();

  /// Rebuilds state from the WAL (what a restart would see).
  void recover();
  std::string wal_text() const;

 private:
  struct Key {
    RunId run;
    std::int64_t index;
    TrialId trial;
    Stage stage;
    auto operator<=>(const Key&) const = default;
  };
  struct TxInfo {
    SimTime at;
    std::int64_t records;
  };

  void append_wal(const std::string& text);
  void apply(std::vector<ProgressRecord> records, SimTime at);
  void load_wal(const std::string& text);

  StoreOptions options_;
  mutable std::shared_mutex mutex_;
  std::string wal_;  // in-memory mirror of the log
  std::vector<ProgressRecord> records_;
  std::map<Key, std::int64_t> index_;
  std::map<std::pair<RunId, TrialId>, std::array<StageCounts, 4>> aggregates_;
  std::vector<TxInfo> txs_;
  std::int64_t next_tx_ = 0;
  std::int64_t next_connection_ = 0;
  int open_ = 0;
  int high_water_ = 0;
  bool up_ = true;
  std::optional<std::size_t> crash_after_;
};

struct FlushPolicy {
  std::size_t max_records = 50;
  double max_age_s = 2.0;
};

/// Buffers records for one group of ranks and commits them as a single transaction.
class Batcher {
 public:
  /// Throws ValidationError when group_size < 1.
  Batcher(Store& store, int group_size, int group_index = 0, FlushPolicy policy = {});

  /// Throws ValidationError when `rank` is outside this batcher's group.
  void add(ProgressRecord record, int rank, SimTime at);
  bool should_flush(SimTime now) const;
  /// Empty buffer: no connection, returns {}. On StoreUnavailable the buffer is retained and
  /// the exception propagates.
  std::vector<std::int64_t> flush(SimTime at);

  std::size_t buffered() const noexcept { return buffer_.size(); }
  int group_size() const noexcept { return group_size_; }
  int group_index() const noexcept { return group_index_; }
  bool owns_rank(int rank) const noexcept { return rank / group_size_ == group_index_; }

 private:
  Store& store_;
  int group_size_;
  int group_index_;
  FlushPolicy policy_;
  std::vector<ProgressRecord> buffer_;
  std::optional<SimTime> oldest_;
};

/// One batcher per group of `group_size` ranks: ceil(ranks / group_size) of them.
std::vector<Batcher> open_batches(Store& store, int ranks, int group_size, FlushPolicy policy = {});

/// Throws ValidationError when group_size < 1.
Batcher open_batch(Store& store, int group_size);

}  // namespace beamtime
