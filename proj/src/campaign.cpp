#include "beamtime/campaign.hpp"

#include <algorithm>
#include <cctype>

#include "beamtime/errors.hpp"

namespace beamtime {

TrialParams parse_trial_params(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaViolation("trial params must be an object");
  TrialParams p;
  for (const auto& [key, value] : j.items()) {
    if (key == "stages") {
      if (!value.is_object()) throw SchemaViolation("stages must be an object keyed by stage name");
      for (const auto& [stage_name, body] : value.items()) {
        Stage stage;
        try {
          stage = parse_stage(stage_name);
        } catch (const ValidationError& e) {
          throw SchemaViolation(e.what());
        }
        StageOverride o;
        for (const auto& [field, v] : body.items()) {
          if (field == "success_rate") {
            if (!v.is_number()) throw SchemaViolation(stage_name + ".success_rate must be a number");
            const double r = v.get<double>();
            if (!(r >= 0.0 && r <= 1.0)) throw SchemaViolation(stage_name + ".success_rate must lie in [0,1]");
            o.success_rate = r;
          } else if (field == "duration") {
            try {
              o.duration = v.get<DistSpec>();
            } catch (const std::exception& e) {
              throw SchemaViolation(stage_name + ".duration: " + e.what());
            }
            if (support_min(*o.duration) < 0.0) throw SchemaViolation(stage_name + ".duration must be >= 0");
          } else if (field == "nodes") {
            if (!v.is_number_integer() || v.get<int>() < 1) throw SchemaViolation(stage_name + ".nodes must be >= 1");
            o.nodes = v.get<int>();
          } else {
            throw SchemaViolation("unknown stage field '" + field + "'");
          }
        }
        p.stages[stage] = o;
      }
    } else if (key == "datasets") {
      if (!value.is_array()) throw SchemaViolation("datasets must be an array of ids");
      for (const auto& d : value) {
        if (!d.is_number_integer()) throw SchemaViolation("dataset ids must be integers");
        p.datasets.push_back(d.get<DatasetId>());
      }
    } else if (key == "supersedes") {
      if (!value.is_number_integer()) throw SchemaViolation("supersedes must be a trial id");
      p.supersedes = value.get<TrialId>();
    } else if (key == "geometry") {
      if (!value.is_object()) throw SchemaViolation("geometry must be an object");
      p.geometry = value;
    } else if (key == "comment") {
      if (!value.is_string()) throw SchemaViolation("comment must be a string");
      p.comment = value.get<std::string>();
    } else {
      throw SchemaViolation("unknown trial parameter '" + key + "'");
    }
  }
  return p;
}

nlohmann::json to_json(const TrialParams& p) {
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [s, o] : p.stages) {
    nlohmann::json body = nlohmann::json::object();
    if (o.success_rate) body["success_rate"] = *o.success_rate;
    if (o.duration) body["duration"] = *o.duration;
    if (o.nodes) body["nodes"] = *o.nodes;
    stages[std::string(to_string(s))] = body;
  }
  nlohmann::json j{{"stages", stages}, {"datasets", p.datasets}, {"geometry", p.geometry}};
  if (p.supersedes) j["supersedes"] = *p.supersedes;
  if (!p.comment.empty()) j["comment"] = p.comment;
  return j;
}

nlohmann::json to_json(const TagExpr& expr) { return expr; }

TagExpr tag_expr_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ValidationError("tag expression must be an array of clauses");
  TagExpr expr;
  for (const auto& clause : j) {
    if (!clause.is_array()) throw ValidationError("each clause must be an array of tag names");
    expr.push_back(clause.get<std::vector<std::string>>());
  }
  return expr;
}

Campaign::Campaign(EventBus& bus, std::function<SimTime()> clock) : bus_(bus), clock_(std::move(clock)) {}

void Campaign::validate_tag(const std::string& tag) {
  if (tag.empty()) throw ValidationError("tag must be nonempty");
  if (tag.size() > 64) throw ValidationError("tag '" + tag + "' is longer than 64 characters");
  for (unsigned char c : tag)
    if (std::isspace(c) || c == ',' || std::iscntrl(c)) throw ValidationError("tag '" + tag + "' has invalid characters");
}

void Campaign::register_run(RunId run) { run_tags_[run]; }

std::vector<RunId> Campaign::runs() const {
  std::vector<RunId> out;
  for (const auto& [id, _] : run_tags_) out.push_back(id);
  return out;
}

std::set<std::string> Campaign::tag_run(RunId run, const std::vector<std::string>& tags) {
  const auto it = run_tags_.find(run);
  if (it == run_tags_.end()) throw UnknownRun("unknown run " + std::to_string(run));
  for (const auto& t : tags) validate_tag(t);
  std::vector<std::string> added;
  for (const auto& t : tags) {
    known_tags_.insert(t);
    if (it->second.insert(t).second) added.push_back(t);
  }
  if (!added.empty())
    bus_.publish(std::string(topics::campaign), EventKind::tag_added, {{"run", run}, {"tags", added}}, clock_());
  return it->second;
}

const std::set<std::string>& Campaign::tags_of(RunId run) const {
  const auto it = run_tags_.find(run);
  if (it == run_tags_.end()) throw UnknownRun("unknown run " + std::to_string(run));
  return it->second;
}

void Campaign::declare_tag(const std::string& tag) {
  validate_tag(tag);
  known_tags_.insert(tag);
}

TrialId Campaign::create_trial(const nlohmann::json& params) {
  auto parsed = parse_trial_params(params);
  for (auto d : parsed.datasets)
    if (!datasets_.contains(d)) throw SchemaViolation("trial references unknown dataset " + std::to_string(d));
  if (parsed.supersedes && !trials_.contains(*parsed.supersedes))
    throw SchemaViolation("supersedes unknown trial " + std::to_string(*parsed.supersedes));

  const TrialId id = trials_.empty() ? 0 : trials_.rbegin()->first + 1;
  TrialSpec spec{id, std::move(parsed), params, clock_(), false, true};
  if (spec.params.supersedes) trials_.at(*spec.params.supersedes).active = false;
  trials_.emplace(id, spec);
  bus_.publish(std::string(topics::campaign), EventKind::trial_created,
               {{"trial", id}, {"params", params}}, clock_());
  return id;
}

void Campaign::update_trial(TrialId id, const nlohmann::json& params) {
  auto it = trials_.find(id);
  if (it == trials_.end()) throw UnknownTrial("unknown trial " + std::to_string(id));
  if (it->second.frozen) throw TrialFrozen("trial " + std::to_string(id) + " is frozen; create a new trial");
  it->second.params = parse_trial_params(params);
  it->second.raw_params = params;
}

void Campaign::freeze_trial(TrialId id) {
  auto it = trials_.find(id);
  if (it == trials_.end()) throw UnknownTrial("unknown trial " + std::to_string(id));
  it->second.frozen = true;
}

void Campaign::set_trial_active(TrialId id, bool active) {
  auto it = trials_.find(id);
  if (it == trials_.end()) throw UnknownTrial("unknown trial " + std::to_string(id));
  it->second.active = active;
}

const TrialSpec& Campaign::trial(TrialId id) const {
  const auto it = trials_.find(id);
  if (it == trials_.end()) throw UnknownTrial("unknown trial " + std::to_string(id));
  return it->second;
}

DatasetId Campaign::create_dataset(const std::string& name, const TagExpr& expr) {
  if (expr.empty()) throw EmptyExpression("dataset '" + name + "' needs at least one clause");
  for (const auto& clause : expr) {
    if (clause.empty()) throw EmptyExpression("dataset '" + name + "' has an empty clause");
    for (const auto& t : clause)
      if (!known_tags_.contains(t)) throw ValidationError("dataset '" + name + "' references unknown tag '" + t + "'");
  }
  const DatasetId id = datasets_.empty() ? 0 : datasets_.rbegin()->first + 1;
  datasets_.emplace(id, DatasetDef{id, name, expr});
  bus_.publish(std::string(topics::campaign), EventKind::dataset_created,
               {{"dataset", id}, {"name", name}, {"expr", to_json(expr)}}, clock_());
  return id;
}

const DatasetDef& Campaign::dataset(DatasetId id) const {
  const auto it = datasets_.find(id);
  if (it == datasets_.end()) throw UnknownDataset("unknown dataset " + std::to_string(id));
  return it->second;
}

bool Campaign::matches(const TagExpr& expr, const std::set<std::string>& tags) {
  return std::any_of(expr.begin(), expr.end(), [&](const auto& clause) {
    return std::all_of(clause.begin(), clause.end(), [&](const auto& t) { return tags.contains(t); });
  });
}

std::vector<RunId> Campaign::resolve_dataset(DatasetId id) const {
  const auto& def = dataset(id);
  std::vector<RunId> out;
  for (const auto& [run, tags] : run_tags_)
    if (matches(def.expr, tags)) out.push_back(run);
  return out;
}

nlohmann::json Campaign::snapshot() const {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& [id, tags] : run_tags_) runs.push_back({{"run", id}, {"tags", tags}});
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& [id, t] : trials_)
    trials.push_back({{"trial", id},
                      {"params", t.raw_params},
                      {"created_ns", to_ns(t.created_at)},
                      {"frozen", t.frozen},
                      {"active", t.active}});
  nlohmann::json datasets = nlohmann::json::array();
  for (const auto& [id, d] : datasets_) {
    datasets.push_back({{"dataset", id}, {"name", d.name}, {"expr", to_json(d.expr)}, {"runs", resolve_dataset(id)}});
  }
  return {{"runs", runs}, {"tags", known_tags_}, {"trials", trials}, {"datasets", datasets}};
}

}  // namespace beamtime
