#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <stop_token>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace beamtime {

// Virtual time is integer nanoseconds since scenario epoch 0.
struct SimClock {
  using rep = std::int64_t;
  using period = std::nano;
  using duration = std::chrono::nanoseconds;
  using time_point = std::chrono::time_point<SimClock>;
  static constexpr bool is_steady = true;
};

using SimTime = SimClock::time_point;
using SimDuration = SimClock::duration;

inline constexpr SimTime kEpoch{};

/// Rounds to the nearest nanosecond.
SimDuration sim_seconds(double seconds);
inline SimTime at_seconds(double seconds) { return kEpoch + sim_seconds(seconds); }
inline constexpr double to_seconds(SimDuration d) { return static_cast<double>(d.count()) * 1e-9; }
inline constexpr double to_seconds(SimTime t) { return to_seconds(t.time_since_epoch()); }
inline constexpr std::int64_t to_ns(SimTime t) { return t.time_since_epoch().count(); }
inline constexpr SimTime from_ns(std::int64_t ns) { return SimTime{SimDuration{ns}}; }

struct EventHandle {
  std::uint64_t seq = 0;
};

struct TraceEntry {
  SimTime fire_at;
  std::uint64_t seq;
  std::string label;
};

/// Single-threaded discrete-event loop. Events fire in (fire_at, seq) order.
class Kernel {
 public:
  using Action = std::function<void()>;

  SimTime now() const noexcept { return now_; }

  /// Throws PastEvent if `at` < now().
  EventHandle schedule(SimTime at, std::string label, Action action);
  EventHandle schedule_in(SimDuration delay, std::string label, Action action) {
    return schedule(now_ + delay, std::move(label), std::move(action));
  }

  /// Returns false if the event already fired or was cancelled.
  bool cancel(EventHandle handle);

  /// Fires every event with fire_at <= t_end, then sets now() = t_end.
  std::size_t run_until(SimTime t_end);

  std::optional<SimTime> next_event_time();
  std::size_t pending() const noexcept { return actions_.size(); }

  void set_tracing(bool on) { tracing_ = on; }
  const std::vector<TraceEntry>& trace() const noexcept { return trace_; }
  std::string trace_text() const;

 private:
  struct Slot {
    SimTime at;
    std::uint64_t seq;
    bool operator>(const Slot& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  struct Pending {
    std::string label;
    Action action;
  };

  void drop_cancelled_head();

  SimTime now_{};
  std::uint64_t next_seq_ = 0;
  std::priority_queue<Slot, std::vector<Slot>, std::greater<>> queue_;
  std::unordered_map<std::uint64_t, Pending> actions_;
  bool tracing_ = false;
  std::vector<TraceEntry> trace_;
};

/// Drives a kernel against the wall clock: one virtual second takes `wall_per_virtual_second`
/// wall seconds. `exclusive` runs each kernel step (e.g. under a writer lock).
class RealtimeDriver {
 public:
  using StepRunner = std::function<void(const std::function<void()>&)>;

  RealtimeDriver(Kernel& kernel, double wall_per_virtual_second, StepRunner exclusive);

  /// Returns the number of fired events. Stops early when `stop` is requested.
  std::size_t run(SimTime t_end, std::stop_token stop, SimDuration max_step = std::chrono::seconds(1));

 private:
  Kernel& kernel_;
  double scale_;
  StepRunner exclusive_;
};

// ---------------------------------------------------------------------------
// Random streams and distributions

/// Deterministic stream keyed by (scenario seed, key). Two streams never share state.
class RngStream {
 public:
  RngStream(std::uint64_t scenario_seed, std::string_view key);

  double uniform01();
  double normal();
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t stream_seed(std::uint64_t scenario_seed, std::string_view key);
std::string image_stream_key(std::int64_t run_id, std::int64_t index);

struct ConstantDist {
  double value = 0.0;
};
struct UniformDist {
  double lo = 0.0;
  double hi = 1.0;
};
struct LogNormalDist {
  double mu = 0.0;
  double sigma = 0.0;
};
struct MixtureComponent;
struct MixtureDist {
  std::vector<MixtureComponent> components;
};

struct DistSpec {
  std::variant<ConstantDist, UniformDist, LogNormalDist, MixtureDist> kind;

  static DistSpec constant(double v) { return {ConstantDist{v}}; }
  static DistSpec uniform(double lo, double hi) { return {UniformDist{lo, hi}}; }
  static DistSpec lognormal(double mu, double sigma) { return {LogNormalDist{mu, sigma}}; }
  /// Lognormal parameterised by its median e^mu.
  static DistSpec lognormal_median(double median, double sigma);
  static DistSpec mixture(std::vector<MixtureComponent> components);
};

struct MixtureComponent {
  double weight = 0.0;
  DistSpec dist;
};

/// Throws InvalidDistribution.
void validate(const DistSpec& dist);

/// Draws one sample. `dist` is assumed valid.
double sample(RngStream& stream, const DistSpec& dist);

/// Lower bound of the support; used to check non-negative durations.
double support_min(const DistSpec& dist);

void to_json(nlohmann::json& j, const DistSpec& d);
void from_json(const nlohmann::json& j, DistSpec& d);

}  // namespace beamtime
