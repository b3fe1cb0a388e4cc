#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/facility.hpp"
#include "beamtime/results_store.hpp"
#include "beamtime/sim_kernel.hpp"
#include "beamtime/stage.hpp"

namespace beamtime {

struct StageProfile {
  Stage stage = Stage::spotfinding;
  double success_rate = 1.0;
  DistSpec duration = DistSpec::constant(1.0);
  /// Per-rank startup (calibration, geometry, file opens).
  double init_io_s = 2.0;
  /// Per-image result write.
  double result_write_s = 0.02;
};

/// Throws ProfileInvalid.
void validate(const StageProfile& p);
/// Stage-time models for one image, with success rates of the P175 experiment.
StageProfile default_profile(Stage s);
std::array<StageProfile, 4> default_profiles();
nlohmann::json to_json(const StageProfile& p);
/// Applies the fields present in `j` on top of `base`. Throws ProfileInvalid.
StageProfile profile_from_json(const nlohmann::json& j, StageProfile base);

struct StageDraw {
  Outcome outcome = Outcome::rejected;
  double duration_s = 0.0;
  std::int32_t n_spots = 0;
};

/// Stream owned by one image for one stage under one trial; independent of which rank runs it.
RngStream image_stage_stream(std::uint64_t seed, TrialId trial, const ImageRef& image, Stage stage);
StageDraw stage_outcome(const ImageRef& image, const StageProfile& profile, RngStream& rng);

struct StageEntry {
  Stage stage = Stage::spotfinding;
  SimTime start{};
  SimTime end{};   // compute finished; the outcome is known here
  SimTime done{};  // result written
  Outcome outcome = Outcome::rejected;
  int rank = 0;
  std::int32_t n_spots = 0;
};

struct ImageTrace {
  ImageRef image;
  std::vector<StageEntry> entries;  // pipeline order
  int rank = 0;
};

enum class SegmentKind { init_io, compute, write };

struct Segment {
  SimTime start{};
  SimTime end{};
  SegmentKind kind = SegmentKind::compute;
  Stage stage = Stage::spotfinding;  // for compute segments
  std::int64_t trace = -1;           // index into traces, -1 for init
};

struct RankTimeline {
  int rank = 0;
  std::vector<Segment> segments;  // time ordered, non-overlapping
};

/// One group commit: records [indices] of JobResult::records become visible at `end`.
struct FlushPlan {
  int group = 0;
  SimTime begin{};
  SimTime end{};
  std::vector<std::size_t> records;
};

enum class IoMode { burst_buffer, shared };
std::string_view to_string(IoMode m);
IoMode parse_io_mode(std::string_view s);

struct DbCost {
  double connect_s = 0.005;
  double per_record_s = 1e-5;
};

struct PoolOptions {
  JobId job_id = 0;
  TrialId trial = 0;
  std::uint64_t seed = 0;
  SimTime start{};
  IoMode io_mode = IoMode::burst_buffer;
  /// Shared filesystem: every open is served one at a time, this long each.
  double shared_open_s = 0.05;
  int group_size = 10;
  FlushPolicy flush{};
  DbCost db{};
  /// When set, flushes are committed here as they happen.
  Store* store = nullptr;
};

struct JobResult {
  JobId job_id = 0;
  Stage stage = Stage::spotfinding;
  TrialId trial = 0;
  int ranks = 0;
  IoMode io_mode = IoMode::burst_buffer;
  SimTime start{};
  double makespan_s = 0.0;
  std::vector<ImageTrace> traces;  // input order
  std::vector<RankTimeline> rank_timelines;
  std::vector<ProgressRecord> records;  // append order, ids unassigned
  std::vector<FlushPlan> flushes;
  int groups = 0;
  int connection_high_water = 0;
  /// Rank-seconds spent blocked on store flushes.
  double db_time_s = 0.0;

  SimTime end() const { return start + sim_seconds(makespan_s); }
  std::vector<ImageRef> survivors() const;
  std::size_t survivor_count() const;
  /// Consumer rank-seconds between job start and end.
  double rank_seconds() const { return makespan_s * std::max(ranks - 1, 0); }
};

/// Rank 0 hands out images one at a time; ranks 1..R-1 pull, compute, write and batch their
/// progress records per group of `group_size` ranks. Throws ProfileInvalid, ValidationError.
JobResult run_stage_job(const std::vector<ImageRef>& images, int ranks, const StageProfile& profile,
                        const PoolOptions& options);

/// Runs the four stages back to back, each over the previous stage's survivors.
std::vector<JobResult> chain_stages(const std::vector<ImageRef>& images, const std::array<StageProfile, 4>& profiles,
                                    const std::array<int, 4>& ranks_per_stage, const PoolOptions& options);

/// Moves every timestamp of `r` by `by`.
void shift(JobResult& r, SimDuration by);

/// `job_id,image_id,rank,stage,start_ns,end_ns,outcome`
std::string trace_csv(const JobResult& r, bool header = true);

/// Largest minus smallest per-rank stall time (gaps before each rank's last segment).
double rank_stall_spread_s(const JobResult& r);

}  // namespace beamtime
