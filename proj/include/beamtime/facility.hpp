#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/event_bus.hpp"
#include "beamtime/sim_kernel.hpp"

namespace beamtime {

using RunId = std::int64_t;

enum class RunState { recording, concluded, transferring, available_remote };
enum class FileKind { data, index, calib };

std::string_view to_string(RunState s);
std::string_view to_string(FileKind k);
FileKind parse_file_kind(std::string_view s);
RunState parse_run_state(std::string_view s);

struct FileAsset {
  std::string path;
  FileKind kind = FileKind::data;
  std::int64_t size_bytes = 0;
  RunId run_id = 0;

  friend bool operator==(const FileAsset&, const FileAsset&) = default;
};

struct ImageRef {
  RunId run_id = 0;
  std::int64_t index = 0;       // position within the run
  std::int32_t file_index = 0;  // which data file holds it
  std::int64_t offset_bytes = 0;
  SimTime recorded_at{};
  std::int64_t image_bytes = 0;

  /// "<run>:<index>"
  std::string id() const;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

struct Run {
  RunId run_id = 0;
  std::string experiment_id;
  SimTime start{};
  SimTime end{};
  RunState state = RunState::recording;
  std::vector<FileAsset> files;
  std::int64_t image_count = 0;
  double rate_hz = 0.0;
  std::int64_t image_bytes = 0;  // after byte_scale
  std::int32_t data_files = 0;

  std::int64_t total_bytes() const;
  std::int64_t data_bytes() const;
};

nlohmann::json to_json(const FileAsset& f);
FileAsset file_from_json(const nlohmann::json& j);

struct FacilityConfig {
  double rate_hz = 120.0;
  double run_duration_s = 300.0;
  std::int64_t image_bytes = 8'000'000;
  std::pair<int, int> files_per_run_range{12, 18};
  double byte_scale = 1.0;
  std::int64_t calib_bytes = 16'000'000;
  bool single_beamline = true;
  std::string experiment_id = "p175";
};

/// Synthetic source facility. Image records are implicit: image i of a run is recorded at
/// start + i / rate_hz, so nothing is materialized until the run concludes.
class Facility {
 public:
  Facility(Kernel& kernel, EventBus& bus, FacilityConfig config, std::uint64_t seed);

  Facility(const Facility&) = delete;
  Facility& operator=(const Facility&) = delete;

  /// Starts recording now; schedules conclusion at now + duration.
  RunId start_run(const std::string& experiment_id, double rate_hz, SimDuration duration,
                  std::optional<std::int64_t> image_bytes = std::nullopt);
  RunId start_run() {
    return start_run(config_.experiment_id, config_.rate_hz, sim_seconds(config_.run_duration_s));
  }

  /// Ends recording now, partitions images into files and publishes file_created + run_concluded.
  const Run& conclude_run(RunId id);

  std::vector<ImageRef> image_refs(RunId id) const;
  std::int64_t images_recorded(RunId id, SimTime at) const;

  const Run& run(RunId id) const;
  bool has_run(RunId id) const { return runs_.contains(id); }
  std::vector<RunId> run_ids() const;
  std::optional<RunId> recording_run() const;

  /// Forward-only state transition. Throws InvalidState on regression.
  void advance_state(RunId id, RunState next);

  const FacilityConfig& config() const noexcept { return config_; }

 private:
  Run& mutable_run(RunId id);
  void on_bus_event(const BusEvent& ev);

  Kernel& kernel_;
  EventBus& bus_;
  FacilityConfig config_;
  std::uint64_t seed_;
  RunId next_run_id_ = 1;
  std::map<RunId, Run> runs_;
  std::map<RunId, EventHandle> pending_conclusions_;
};

}  // namespace beamtime
