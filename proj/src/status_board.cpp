#include "beamtime/status_board.hpp"

#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string_view to_string(Health h) {
  switch (h) {
    case Health::active: return "active";
    case Health::degraded: return "degraded";
    case Health::unavailable: return "unavailable";
  }
  return "unknown";
}

Health parse_health(std::string_view s) {
  if (s == "active") return Health::active;
  if (s == "degraded") return Health::degraded;
  if (s == "unavailable") return Health::unavailable;
  throw ValidationError("unknown status '" + std::string(s) + "'");
}

namespace {

std::string describe(Health h) { return "System is " + std::string(to_string(h)); }

}  // namespace

StatusBoard::StatusBoard(std::string epoch_iso) : epoch_iso_(std::move(epoch_iso)) {
  std::tm tm{};
  std::istringstream in(epoch_iso_);
  in >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%S");
  if (in.fail()) throw ValidationError("epoch must look like 2020-09-18T08:00:00");
  epoch_unix_ = static_cast<long long>(timegm(&tm));

  add_resource({"dtns", "Data Transfer Nodes", "", "filesystem", {}, Health::active, {}});
  add_resource({"community_filesystem", "Community File System", "", "filesystem", {}, Health::active, {}});
  add_resource({"scratch", "Scratch File System", "", "filesystem", {}, Health::active, {}});
  add_resource({"compute", "Compute Nodes", "", "compute", {}, Health::active, {}});
}

const ResourceStatus& StatusBoard::get(const std::string& name) const {
  const auto it = resources_.find(name);
  if (it == resources_.end()) throw ValidationError("unknown resource '" + name + "'");
  return it->second;
}

std::vector<std::string> StatusBoard::names() const {
  std::vector<std::string> out;
  for (const auto& [n, _] : resources_) out.push_back(n);
  return out;
}

void StatusBoard::add_resource(ResourceStatus status) {
  if (status.description.empty()) status.description = describe(status.status);
  const auto name = status.name;
  resources_[name] = std::move(status);
}

void StatusBoard::set_status(const std::string& name, Health health, SimTime at, std::optional<std::string> note) {
  auto it = resources_.find(name);
  if (it == resources_.end()) throw ValidationError("unknown resource '" + name + "'");
  auto& r = it->second;
  const bool changed = r.status != health;
  r.status = health;
  r.description = describe(health);
  r.updated_at = at;
  r.notes.clear();
  if (note) r.notes.push_back(*note);
  if (changed)
    for (const auto& obs : observers_) obs(name, health);
}

void StatusBoard::add_planned_outage(PlannedOutage outage) {
  get(outage.resource);
  if (outage.end <= outage.start) throw ValidationError("outage window must have end > start");
  outages_.push_back(std::move(outage));
}

std::vector<PlannedOutage> StatusBoard::planned_outages(SimTime now) const {
  std::vector<PlannedOutage> out;
  for (const auto& o : outages_)
    if (o.start > now) out.push_back(o);
  return out;
}

void StatusBoard::install(Kernel& kernel) {
  for (const auto& o : outages_) {
    kernel.schedule(o.start, "outage begins: " + o.resource, [this, &kernel, o] {
      set_status(o.resource, Health::unavailable, kernel.now(), o.description);
    });
    kernel.schedule(o.end, "outage ends: " + o.resource,
                    [this, &kernel, o] { set_status(o.resource, Health::active, kernel.now()); });
  }
}

std::string StatusBoard::iso_time(SimTime t) const {
  const auto secs = static_cast<std::time_t>(epoch_unix_ + static_cast<long long>(std::floor(to_seconds(t))));
  std::tm tm{};
  gmtime_r(&secs, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S");
  return out.str();
}

nlohmann::ordered_json StatusBoard::to_json(const ResourceStatus& s) const {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["full_name"] = s.full_name;
  j["description"] = s.description;
  j["system_type"] = s.system_type;
  j["notes"] = s.notes;
  j["status"] = to_string(s.status);
  j["updated_at"] = iso_time(s.updated_at);
  return j;
}

nlohmann::ordered_json StatusBoard::to_json(const PlannedOutage& o) const {
  nlohmann::ordered_json j;
  j["resource"] = o.resource;
  j["window"] = {{"start", iso_time(o.start)}, {"end", iso_time(o.end)}};
  j["description"] = o.description;
  return j;
}

}  // namespace beamtime
