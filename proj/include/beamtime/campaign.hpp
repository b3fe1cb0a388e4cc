#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/event_bus.hpp"
#include "beamtime/facility.hpp"
#include "beamtime/sim_kernel.hpp"
#include "beamtime/stage.hpp"

namespace beamtime {

using DatasetId = std::int64_t;

/// Per-stage overrides a trial may carry.
struct StageOverride {
  std::optional<double> success_rate;
  std::optional<DistSpec> duration;
  std::optional<int> nodes;
};

struct TrialParams {
  std::map<Stage, StageOverride> stages;
  std::vector<DatasetId> datasets;
  std::optional<TrialId> supersedes;
  nlohmann::json geometry = nlohmann::json::object();
  std::string comment;
};

/// Throws SchemaViolation.
TrialParams parse_trial_params(const nlohmann::json& j);
nlohmann::json to_json(const TrialParams& p);

struct TrialSpec {
  TrialId trial_id = 0;
  TrialParams params;
  nlohmann::json raw_params;
  SimTime created_at{};
  bool frozen = false;
  bool active = true;
};

/// OR of AND-clauses over tag names.
using TagExpr = std::vector<std::vector<std::string>>;

struct DatasetDef {
  DatasetId dataset_id = 0;
  std::string name;
  TagExpr expr;
};

/// Tags, trials and datasets of one experiment. All mutations are monotone additions.
class Campaign {
 public:
  Campaign(EventBus& bus, std::function<SimTime()> clock);

  void register_run(RunId run);
  bool has_run(RunId run) const { return run_tags_.contains(run); }
  std::vector<RunId> runs() const;

  /// Throws UnknownRun, ValidationError for malformed tags.
  std::set<std::string> tag_run(RunId run, const std::vector<std::string>& tags);
  const std::set<std::string>& tags_of(RunId run) const;
  void declare_tag(const std::string& tag);
  const std::set<std::string>& tags() const noexcept { return known_tags_; }

  TrialId create_trial(const nlohmann::json& params);
  /// Only while not frozen; throws TrialFrozen afterwards.
  void update_trial(TrialId id, const nlohmann::json& params);
  void freeze_trial(TrialId id);
  void set_trial_active(TrialId id, bool active);
  const TrialSpec& trial(TrialId id) const;
  const std::map<TrialId, TrialSpec>& trials() const noexcept { return trials_; }

  /// Throws EmptyExpression or ValidationError (unknown tag).
  DatasetId create_dataset(const std::string& name, const TagExpr& expr);
  const DatasetDef& dataset(DatasetId id) const;
  const std::map<DatasetId, DatasetDef>& datasets() const noexcept { return datasets_; }

  /// Exact, sorted set of runs whose tags satisfy the dataset expression.
  std::vector<RunId> resolve_dataset(DatasetId id) const;
  static bool matches(const TagExpr& expr, const std::set<std::string>& tags);

  nlohmann::json snapshot() const;

  static void validate_tag(const std::string& tag);

 private:
  EventBus& bus_;
  std::function<SimTime()> clock_;
  std::map<RunId, std::set<std::string>> run_tags_;
  std::set<std::string> known_tags_;
  std::map<TrialId, TrialSpec> trials_;
  std::map<DatasetId, DatasetDef> datasets_;
};

nlohmann::json to_json(const TagExpr& expr);
TagExpr tag_expr_from_json(const nlohmann::json& j);

}  // namespace beamtime
