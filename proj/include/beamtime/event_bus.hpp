#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/sim_kernel.hpp"

namespace beamtime {

enum class EventKind {
  file_created,
  run_concluded,
  transfer_started,
  transfer_completed,
  job_submitted,
  job_state_changed,
  trial_created,
  tag_added,
  dataset_created,
  job_progress,
};

std::string_view to_string(EventKind kind);
/// Throws std::invalid_argument for unknown names.
EventKind parse_event_kind(std::string_view name);

struct BusEvent {
  std::string topic;
  std::int64_t offset = 0;
  SimTime time{};
  EventKind kind{};
  nlohmann::json payload;
};

struct Cursor {
  std::string topic;
  std::int64_t next_offset = 0;
};

namespace topics {
inline constexpr std::string_view runs = "runs";
inline constexpr std::string_view transfers = "transfers";
inline constexpr std::string_view jobs = "jobs";
inline constexpr std::string_view campaign = "campaign";
}  // namespace topics

/// Formats `<offset>\t<time_ns>\t<kind>\t<compact-json>` (no trailing newline).
std::string format_record(const BusEvent& event);
/// Parses one record line; throws CorruptLog tagged with `line_no`.
BusEvent parse_record(std::string_view line, std::string topic, std::size_t line_no);
/// Reads a whole log file. Offsets must be gapless from 0.
std::vector<BusEvent> read_log(const std::filesystem::path& file, const std::string& topic);

/// Append-only per-topic event log. Publishes are serialized under an internal mutex.
class EventBus {
 public:
  struct Options {
    bool strict_topics = true;
    /// When set, each topic is mirrored to `<dir>/<topic>.log` and reloaded on construction.
    std::optional<std::filesystem::path> persist_dir;
  };

  using Observer = std::function<void(const BusEvent&)>;

  EventBus() : EventBus(Options{}) {}
  explicit EventBus(Options options, std::vector<std::string> declared_topics = default_topics());

  static std::vector<std::string> default_topics();

  void declare(const std::string& topic);
  bool has_topic(const std::string& topic) const;
  std::vector<std::string> topic_names() const;

  std::int64_t publish(const std::string& topic, EventKind kind, nlohmann::json payload, SimTime time);

  /// Throws UnknownTopic for undeclared topics. Cursor is clamped to the topic length.
  Cursor subscribe(const std::string& topic, std::int64_t from_offset = 0) const;

  /// Returns up to `max_n` events starting at the cursor and advances it.
  std::vector<BusEvent> poll(Cursor& cursor, std::size_t max_n = SIZE_MAX) const;

  std::int64_t length(const std::string& topic) const;
  std::vector<BusEvent> events(const std::string& topic) const;

  /// Observers run synchronously after each publish, outside the bus lock.
  void add_observer(Observer observer);

 private:
  Options options_;
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<BusEvent>> topics_;
  std::vector<Observer> observers_;
};

}  // namespace beamtime
