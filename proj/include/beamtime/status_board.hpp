#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/sim_kernel.hpp"

namespace beamtime {

enum class Health { active, degraded, unavailable };

std::string_view to_string(Health h);
Health parse_health(std::string_view s);

struct ResourceStatus {
  std::string name;
  std::string full_name;
  std::string description;
  std::string system_type;
  std::vector<std::string> notes;
  Health status = Health::active;
  SimTime updated_at{};
};

struct PlannedOutage {
  std::string resource;
  SimTime start{};
  SimTime end{};
  std::string description;
};

/// Resource health as served by GET /status. Serialization uses `epoch_iso` as the
/// wall-clock time of virtual time zero.
class StatusBoard {
 public:
  using Observer = std::function<void(const std::string& resource, Health health)>;

  explicit StatusBoard(std::string epoch_iso = "2020-09-18T08:00:00");

  bool has(const std::string& name) const { return resources_.contains(name); }
  const ResourceStatus& get(const std::string& name) const;
  std::vector<std::string> names() const;

  void add_resource(ResourceStatus status);
  void set_status(const std::string& name, Health health, SimTime at, std::optional<std::string> note = {});
  bool is_active(const std::string& name) const { return get(name).status == Health::active; }

  void add_planned_outage(PlannedOutage outage);
  /// Outages starting strictly after `now`.
  std::vector<PlannedOutage> planned_outages(SimTime now) const;
  const std::vector<PlannedOutage>& all_outages() const noexcept { return outages_; }
  /// Schedules status flips for every registered outage window.
  void install(Kernel& kernel);

  void add_observer(Observer observer) { observers_.push_back(std::move(observer)); }

  /// "YYYY-MM-DDTHH:MM:SS" for a virtual instant.
  std::string iso_time(SimTime t) const;

  /// Field order: name, full_name, description, system_type, notes, status, updated_at.
  nlohmann::ordered_json to_json(const ResourceStatus& s) const;
  nlohmann::ordered_json to_json(const PlannedOutage& o) const;

 private:
  std::string epoch_iso_;
  long long epoch_unix_ = 0;
  std::map<std::string, ResourceStatus> resources_;
  std::vector<PlannedOutage> outages_;
  std::vector<Observer> observers_;
};

}  // namespace beamtime
