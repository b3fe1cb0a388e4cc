#include "beamtime/simulation.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "beamtime/errors.hpp"
#include "beamtime/metrics.hpp"

#ifndef BEAMTIME_SCENARIO_DIR
#define BEAMTIME_SCENARIO_DIR "scenarios"
#endif

namespace beamtime {

namespace {

using nlohmann::json;

/// Typed, pointer-tracking view of one config object.
class Reader {
 public:
  Reader(const json& j, std::string ptr) : j_(j), ptr_(std::move(ptr)) {
    if (!j_.is_object()) throw ConfigError(ptr_, "expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, _] : j_.items())
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(at(k), "unknown key");
  }
  bool has(const std::string& k) const { return j_.contains(k); }
  std::string at(const std::string& k) const { return ptr_ + "/" + k; }
  const json& raw(const std::string& k) const { return j_.at(k); }

  double num(const std::string& k, double def) const {
    if (!has(k)) return def;
    if (!raw(k).is_number()) throw ConfigError(at(k), "expected a number");
    return raw(k).get<double>();
  }
  double positive(const std::string& k, double def) const {
    const double v = num(k, def);
    if (!(v > 0.0)) throw ConfigError(at(k), "must be > 0");
    return v;
  }
  double nonneg(const std::string& k, double def) const {
    const double v = num(k, def);
    if (!(v >= 0.0)) throw ConfigError(at(k), "must be >= 0");
    return v;
  }
  std::int64_t integer(const std::string& k, std::int64_t def, std::int64_t min = 0) const {
    if (!has(k)) return def;
    if (!raw(k).is_number_integer()) throw ConfigError(at(k), "expected an integer");
    const auto v = raw(k).get<std::int64_t>();
    if (v < min) throw ConfigError(at(k), "must be >= " + std::to_string(min));
    return v;
  }
  bool boolean(const std::string& k, bool def) const {
    if (!has(k)) return def;
    if (!raw(k).is_boolean()) throw ConfigError(at(k), "expected true or false");
    return raw(k).get<bool>();
  }
  std::string str(const std::string& k, const std::string& def) const {
    if (!has(k)) return def;
    if (!raw(k).is_string()) throw ConfigError(at(k), "expected a string");
    return raw(k).get<std::string>();
  }
  std::vector<std::string> strings(const std::string& k, std::vector<std::string> def) const {
    if (!has(k)) return def;
    if (!raw(k).is_array()) throw ConfigError(at(k), "expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < raw(k).size(); ++i) {
      if (!raw(k)[i].is_string()) throw ConfigError(at(k) + "/" + std::to_string(i), "expected a string");
      out.push_back(raw(k)[i].get<std::string>());
    }
    return out;
  }
  const json& array(const std::string& k) const {
    if (!raw(k).is_array()) throw ConfigError(at(k), "expected an array");
    return raw(k);
  }
  Reader sub(const std::string& k) const { return Reader(raw(k), at(k)); }

 private:
  const json& j_;
  std::string ptr_;
};

std::string idx(const std::string& ptr, std::size_t i) { return ptr + "/" + std::to_string(i); }

void parse_facility(const Reader& r, FacilityConfig& f) {
  r.allow({"experiment_id", "image_bytes", "byte_scale", "files_per_run", "calib_bytes", "rate_hz", "run_duration_s"});
  f.experiment_id = r.str("experiment_id", f.experiment_id);
  f.image_bytes = r.integer("image_bytes", f.image_bytes, 1);
  f.byte_scale = r.positive("byte_scale", f.byte_scale);
  f.calib_bytes = r.integer("calib_bytes", f.calib_bytes, 0);
  f.rate_hz = r.positive("rate_hz", f.rate_hz);
  f.run_duration_s = r.positive("run_duration_s", f.run_duration_s);
  if (r.has("files_per_run")) {
    const auto& a = r.array("files_per_run");
    if (a.size() != 2 || !a[0].is_number_integer() || !a[1].is_number_integer())
      throw ConfigError(r.at("files_per_run"), "expected [min, max] integers");
    f.files_per_run_range = {a[0].get<int>(), a[1].get<int>()};
    if (f.files_per_run_range.first < 4 || f.files_per_run_range.second < f.files_per_run_range.first)
      throw ConfigError(r.at("files_per_run"), "need 4 <= min <= max");
  }
}

void parse_shift(const Reader& r, ShiftConfig& s) {
  r.allow({"runs", "rate_hz", "duration_s", "gap_s", "start_s", "tags"});
  s.runs = static_cast<int>(r.integer("runs", s.runs, 0));
  s.rate_hz = r.positive("rate_hz", s.rate_hz);
  s.duration_s = r.positive("duration_s", s.duration_s);
  s.gap_s = r.nonneg("gap_s", s.gap_s);
  s.start_s = r.nonneg("start_s", s.start_s);
  s.tags = r.strings("tags", s.tags);
  for (std::size_t i = 0; i < s.tags.size(); ++i) {
    try {
      Campaign::validate_tag(s.tags[i]);
    } catch (const ValidationError& e) {
      throw ConfigError(idx(r.at("tags"), i), e.what());
    }
  }
}

void parse_mover(const Reader& r, MoverConfig& m) {
  r.allow({"max_parallel", "retry_base_s", "retry_factor", "max_attempts", "fault_probability", "destinations"});
  m.max_parallel = static_cast<int>(r.integer("max_parallel", m.max_parallel, 1));
  m.retry_base_s = r.nonneg("retry_base_s", m.retry_base_s);
  m.retry_factor = r.positive("retry_factor", m.retry_factor);
  m.max_attempts = static_cast<int>(r.integer("max_attempts", m.max_attempts, 1));
  m.fault_probability = r.nonneg("fault_probability", m.fault_probability);
  if (m.fault_probability > 1.0) throw ConfigError(r.at("fault_probability"), "must be <= 1");
  m.destination_resources = r.strings("destinations", m.destination_resources);
}

void parse_orchestrator(const Reader& r, ScenarioConfig& c) {
  r.allow({"stage_nodes", "ranks_per_node", "node_scale", "reservation", "heartbeat_s", "shared_open_s", "group_size",
           "flush_records", "flush_age_s", "db_connect_s", "db_per_record_s", "cancel_superseded", "last_stage"});
  auto& o = c.orchestrator;
  if (r.has("stage_nodes")) {
    const auto& a = r.array("stage_nodes");
    if (a.size() != 4) throw ConfigError(r.at("stage_nodes"), "expected four node counts");
    for (std::size_t i = 0; i < 4; ++i) {
      if (!a[i].is_number_integer() || a[i].get<int>() < 1) throw ConfigError(idx(r.at("stage_nodes"), i), "must be >= 1");
      o.stage_nodes[i] = a[i].get<int>();
    }
  }
  o.ranks_per_node = static_cast<int>(r.integer("ranks_per_node", o.ranks_per_node, 1));
  o.node_scale = r.positive("node_scale", o.node_scale);
  if (r.has("reservation")) c.pipeline_reservation = static_cast<int>(r.integer("reservation", 0, 0));
  o.heartbeat_s = r.positive("heartbeat_s", o.heartbeat_s);
  o.shared_open_s = r.nonneg("shared_open_s", o.shared_open_s);
  o.group_size = static_cast<int>(r.integer("group_size", o.group_size, 1));
  o.flush.max_records = static_cast<std::size_t>(r.integer("flush_records", static_cast<std::int64_t>(o.flush.max_records), 1));
  o.flush.max_age_s = r.nonneg("flush_age_s", o.flush.max_age_s);
  o.db.connect_s = r.nonneg("db_connect_s", o.db.connect_s);
  o.db.per_record_s = r.nonneg("db_per_record_s", o.db.per_record_s);
  o.cancel_superseded = r.boolean("cancel_superseded", o.cancel_superseded);
  if (r.has("last_stage")) {
    try {
      o.last_stage = parse_stage(r.str("last_stage", ""));
    } catch (const ValidationError& e) {
      throw ConfigError(r.at("last_stage"), e.what());
    }
  }
}

void parse_profiles(const Reader& r, OrchestratorConfig& o) {
  r.allow({"spotfinding", "indexing", "refinement", "integration"});
  for (auto s : kStages) {
    const std::string name(to_string(s));
    if (!r.has(name)) continue;
    const Reader p = r.sub(name);
    p.allow({"success_rate", "duration", "init_io_s", "result_write_s"});
    try {
      o.profiles[stage_index(s)] = profile_from_json(r.raw(name), o.profiles[stage_index(s)]);
    } catch (const ProfileInvalid& e) {
      throw ConfigError(r.at(name), e.what());
    }
  }
}

void parse_campaign(const Reader& r, ScenarioConfig& c) {
  r.allow({"datasets", "trials", "tags"});
  if (r.has("datasets")) {
    const auto& a = r.array("datasets");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader d(a[i], idx(r.at("datasets"), i));
      d.allow({"name", "expr"});
      DatasetConfig dc;
      dc.name = d.str("name", "dataset" + std::to_string(i));
      if (!d.has("expr")) throw ConfigError(d.at("expr"), "missing tag expression");
      try {
        dc.expr = tag_expr_from_json(d.raw("expr"));
      } catch (const std::exception& e) {
        throw ConfigError(d.at("expr"), e.what());
      }
      if (dc.expr.empty() || std::any_of(dc.expr.begin(), dc.expr.end(), [](const auto& cl) { return cl.empty(); }))
        throw ConfigError(d.at("expr"), "tag expression needs nonempty clauses");
      c.datasets.push_back(std::move(dc));
    }
  }
  if (r.has("trials")) {
    const auto& a = r.array("trials");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader t(a[i], idx(r.at("trials"), i));
      t.allow({"at_s", "params"});
      TrialEventConfig tc;
      tc.at_s = t.nonneg("at_s", 0.0);
      tc.params = t.has("params") ? t.raw("params") : json::object();
      try {
        const auto p = parse_trial_params(tc.params);
        for (auto d : p.datasets)
          if (d < 0 || d >= static_cast<DatasetId>(c.datasets.size()))
            throw SchemaViolation("unknown dataset " + std::to_string(d));
        if (p.supersedes && (*p.supersedes < 0 || *p.supersedes >= static_cast<TrialId>(i)))
          throw SchemaViolation("supersedes must name an earlier trial");
      } catch (const SchemaViolation& e) {
        throw ConfigError(t.at("params"), e.what());
      }
      c.trials.push_back(std::move(tc));
    }
  }
  if (r.has("tags")) {
    const auto& a = r.array("tags");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader t(a[i], idx(r.at("tags"), i));
      t.allow({"at_s", "run", "tags"});
      TagEventConfig tc;
      tc.at_s = t.nonneg("at_s", 0.0);
      tc.run = t.integer("run", 1, 1);
      tc.tags = t.strings("tags", {});
      for (std::size_t k = 0; k < tc.tags.size(); ++k) {
        try {
          Campaign::validate_tag(tc.tags[k]);
        } catch (const ValidationError& e) {
          throw ConfigError(idx(t.at("tags"), k), e.what());
        }
      }
      c.tags.push_back(std::move(tc));
    }
  }
}

void parse_status(const Reader& r, ScenarioConfig& c) {
  r.allow({"events", "outages", "epoch"});
  c.epoch_iso = r.str("epoch", c.epoch_iso);
  const std::set<std::string> known{"dtns", "community_filesystem", "scratch", "compute"};
  auto resource = [&](const Reader& e) {
    const auto name = e.str("resource", "");
    if (!known.contains(name)) throw ConfigError(e.at("resource"), "unknown resource '" + name + "'");
    return name;
  };
  if (r.has("events")) {
    const auto& a = r.array("events");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader e(a[i], idx(r.at("events"), i));
      e.allow({"at_s", "resource", "status"});
      StatusEventConfig sc;
      sc.at_s = e.nonneg("at_s", 0.0);
      sc.resource = resource(e);
      try {
        sc.status = parse_health(e.str("status", "active"));
      } catch (const std::exception& ex) {
        throw ConfigError(e.at("status"), ex.what());
      }
      c.status_events.push_back(sc);
    }
  }
  if (r.has("outages")) {
    const auto& a = r.array("outages");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader e(a[i], idx(r.at("outages"), i));
      e.allow({"resource", "start_s", "end_s", "description"});
      OutageConfig oc;
      oc.resource = resource(e);
      oc.start_s = e.nonneg("start_s", 0.0);
      oc.end_s = e.nonneg("end_s", 0.0);
      if (oc.end_s <= oc.start_s) throw ConfigError(e.at("end_s"), "must be after start_s");
      oc.description = e.str("description", "Scheduled maintenance");
      c.outages.push_back(oc);
    }
  }
}

void parse_background(const json& a, const std::string& ptr, ScenarioConfig& c) {
  if (!a.is_array()) throw ConfigError(ptr, "expected an array");
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Reader b(a[i], idx(ptr, i));
    b.allow({"at_s", "count", "every_s", "nodes", "duration_s", "target", "reservation", "exit_after_warning_s"});
    BackgroundJobConfig bj;
    bj.at_s = b.nonneg("at_s", 0.0);
    bj.count = static_cast<int>(b.integer("count", 1, 1));
    bj.every_s = b.nonneg("every_s", 0.0);
    bj.nodes = static_cast<int>(b.integer("nodes", 1, 1));
    bj.duration_s = b.nonneg("duration_s", bj.duration_s);
    try {
      bj.kind = parse_target_kind(b.str("target", "batch"));
    } catch (const ValidationError& e) {
      throw ConfigError(b.at("target"), e.what());
    }
    bj.reservation = static_cast<int>(b.integer("reservation", 0, 0));
    if (bj.kind != TargetKind::batch && bj.reservation >= static_cast<int>(c.reservations.size()))
      throw ConfigError(b.at("reservation"), "no such reservation");
    if (b.has("exit_after_warning_s")) bj.exit_after_warning_s = b.nonneg("exit_after_warning_s", 0.0);
    c.background.push_back(bj);
  }
}

}  // namespace

ScenarioConfig parse_scenario(const nlohmann::json& doc) {
  const Reader r(doc, "");
  r.allow({"name", "seed", "horizon_s", "drain_s", "facility", "shift", "link", "mover", "pool", "reservations",
           "orchestrator", "profiles", "campaign", "status", "background", "flags", "api"});
  ScenarioConfig c;
  c.source = doc;
  c.name = r.str("name", c.name);
  c.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(c.seed), 0));
  if (r.has("horizon_s")) c.horizon_s = r.positive("horizon_s", 1.0);
  c.drain_s = r.nonneg("drain_s", c.drain_s);
  c.orchestrator.seed = c.seed;
  c.facility.experiment_id = "p175";

  if (r.has("facility")) parse_facility(r.sub("facility"), c.facility);
  if (r.has("shift")) parse_shift(r.sub("shift"), c.shift);
  if (r.has("link")) {
    try {
      c.mover.link = link_from_json(r.raw("link"));
    } catch (const ConfigError& e) {
      throw ConfigError("/link" + e.pointer(), e.what());
    } catch (const std::exception& e) {
      throw ConfigError("/link", e.what());
    }
  }
  if (r.has("mover")) parse_mover(r.sub("mover"), c.mover);
  if (r.has("pool")) {
    const Reader p = r.sub("pool");
    p.allow({"nodes", "grace_s"});
    c.pool.total_nodes = static_cast<int>(p.integer("nodes", c.pool.total_nodes, 1));
    c.pool.default_grace_s = p.nonneg("grace_s", c.pool.default_grace_s);
  }
  if (r.has("reservations")) {
    const auto& a = r.array("reservations");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Reader rr(a[i], idx("/reservations", i));
      rr.allow({"nodes", "start_s", "end_s", "grace_s"});
      ReservationConfig rc;
      rc.nodes = static_cast<int>(rr.integer("nodes", 1, 1));
      if (rc.nodes > c.pool.total_nodes) throw ConfigError(rr.at("nodes"), "larger than the pool");
      rc.start_s = rr.nonneg("start_s", 0.0);
      if (rr.has("end_s")) {
        rc.end_s = rr.positive("end_s", 1.0);
        if (*rc.end_s <= rc.start_s) throw ConfigError(rr.at("end_s"), "must be after start_s");
      }
      rc.grace_s = rr.nonneg("grace_s", c.pool.default_grace_s);
      c.reservations.push_back(rc);
    }
  }
  if (r.has("orchestrator")) parse_orchestrator(r.sub("orchestrator"), c);
  if (c.pipeline_reservation && *c.pipeline_reservation >= static_cast<int>(c.reservations.size()))
    throw ConfigError("/orchestrator/reservation", "no such reservation");
  if (r.has("profiles")) parse_profiles(r.sub("profiles"), c.orchestrator);
  if (r.has("campaign")) parse_campaign(r.sub("campaign"), c);
  if (r.has("status")) parse_status(r.sub("status"), c);
  if (r.has("background")) parse_background(r.raw("background"), "/background", c);
  if (r.has("flags")) {
    const Reader f = r.sub("flags");
    f.allow({"io_mode", "live_priority", "strict_topics"});
    try {
      c.orchestrator.io_mode = parse_io_mode(f.str("io_mode", "burstbuffer"));
    } catch (const ValidationError& e) {
      throw ConfigError(f.at("io_mode"), e.what());
    }
    c.orchestrator.live_priority = f.boolean("live_priority", false);
    c.strict_topics = f.boolean("strict_topics", true);
  }
  if (r.has("api")) {
    const Reader a = r.sub("api");
    a.allow({"token", "center", "machine", "allocation_node_hours"});
    c.api.token = a.str("token", c.api.token);
    if (c.api.token.empty()) throw ConfigError(a.at("token"), "must be nonempty");
    c.api.center = a.str("center", c.api.center);
    c.api.machine = a.str("machine", c.api.machine);
    c.api.allocation_node_hours = a.nonneg("allocation_node_hours", c.api.allocation_node_hours);
  }
  return c;
}

ScenarioConfig load_scenario(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("", "cannot open " + file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  return parse_scenario(doc);
}

std::vector<std::string> bundled_scenario_names() { return {"lv95-shift", "p175-day", "bad-io-day", "fig8-backlog"}; }

std::optional<std::filesystem::path> bundled_scenario(const std::string& name) {
  std::vector<std::filesystem::path> roots;
  if (const char* env = std::getenv("BEAMTIME_SCENARIOS")) roots.emplace_back(env);
  roots.emplace_back(BEAMTIME_SCENARIO_DIR);
  roots.emplace_back("scenarios");
  for (const auto& root : roots) {
    const auto p = root / (name + ".json");
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Simulation::Simulation(ScenarioConfig config, std::optional<std::filesystem::path> persist_dir)
    : config_(std::move(config)), persist_dir_(std::move(persist_dir)), status_(config_.epoch_iso) {
  const auto& s = config_.shift;
  const double last_end = s.start_s + s.runs * s.duration_s + std::max(0, s.runs - 1) * s.gap_s;
  horizon_ = at_seconds(config_.horizon_s.value_or(last_end + config_.drain_s));

  EventBus::Options bus_opts;
  bus_opts.strict_topics = config_.strict_topics;
  StoreOptions store_opts;
  MoverConfig mover_cfg = config_.mover;
  if (persist_dir_) {
    std::filesystem::remove_all(*persist_dir_ / "events");
    std::filesystem::remove_all(*persist_dir_ / "store");
    std::filesystem::remove(*persist_dir_ / "mover_queue.log");
    std::filesystem::create_directories(*persist_dir_);
    bus_opts.persist_dir = *persist_dir_ / "events";
    store_opts.dir = *persist_dir_ / "store";
    mover_cfg.queue_file = *persist_dir_ / "mover_queue.log";
  }
  bus_ = std::make_unique<EventBus>(bus_opts);
  facility_ = std::make_unique<Facility>(kernel_, *bus_, config_.facility, config_.seed);
  mover_ = std::make_unique<DataMover>(kernel_, *bus_, &status_, mover_cfg, config_.seed);
  campaign_ = std::make_unique<Campaign>(*bus_, [this] { return kernel_.now(); });
  scheduler_ = std::make_unique<Scheduler>(kernel_, config_.pool);
  store_ = std::make_unique<Store>(store_opts);
  install();
}

Simulation::~Simulation() = default;

void Simulation::install() {
  std::vector<ReservationId> reservations;
  for (const auto& r : config_.reservations)
    reservations.push_back(scheduler_->create_reservation(
        r.nodes, at_seconds(r.start_s), r.end_s ? at_seconds(*r.end_s) : std::max(horizon_, at_seconds(r.start_s + 1)),
        r.grace_s));

  auto orch_cfg = config_.orchestrator;
  if (config_.pipeline_reservation) orch_cfg.target = Target::urgent(reservations.at(*config_.pipeline_reservation));
  orchestrator_ = std::make_unique<Orchestrator>(kernel_, *bus_, *facility_, *campaign_, *scheduler_, *store_, orch_cfg);

  for (const auto& o : config_.outages)
    status_.add_planned_outage({o.resource, at_seconds(o.start_s), at_seconds(o.end_s), o.description});
  status_.install(kernel_);
  for (const auto& e : config_.status_events)
    kernel_.schedule(at_seconds(e.at_s), "status " + e.resource, [this, e] {
      status_.set_status(e.resource, e.status, kernel_.now());
    });

  for (const auto& t : config_.shift.tags) campaign_->declare_tag(t);
  for (const auto& te : config_.tags)
    for (const auto& t : te.tags) campaign_->declare_tag(t);
  for (const auto& d : config_.datasets) {
    for (const auto& clause : d.expr)
      for (const auto& t : clause) campaign_->declare_tag(t);
    campaign_->create_dataset(d.name, d.expr);
  }

  // Order matters: the orchestrator registers concluded runs before they are tagged.
  orchestrator_->start();
  auto pending_tags = std::make_shared<std::map<RunId, std::vector<std::string>>>();
  bus_->add_observer([this, pending_tags](const BusEvent& ev) {
    if (ev.topic != topics::runs || ev.kind != EventKind::run_concluded) return;
    const auto run = ev.payload.at("run").get<RunId>();
    kernel_.schedule(kernel_.now(), "tag concluded run", [this, run, pending_tags] {
      if (!config_.shift.tags.empty()) campaign_->tag_run(run, config_.shift.tags);
      if (const auto it = pending_tags->find(run); it != pending_tags->end()) {
        campaign_->tag_run(run, it->second);
        pending_tags->erase(it);
      }
    });
  });
  for (const auto& te : config_.tags)
    kernel_.schedule(at_seconds(te.at_s), "tag run", [this, te, pending_tags] {
      if (campaign_->has_run(te.run)) {
        campaign_->tag_run(te.run, te.tags);
      } else {
        auto& v = (*pending_tags)[te.run];
        v.insert(v.end(), te.tags.begin(), te.tags.end());
      }
    });
  for (const auto& tr : config_.trials)
    kernel_.schedule(at_seconds(tr.at_s), "create trial", [this, tr] { campaign_->create_trial(tr.params); });

  const auto& s = config_.shift;
  for (int k = 0; k < s.runs; ++k)
    kernel_.schedule(at_seconds(s.start_s + k * (s.duration_s + s.gap_s)), "start run", [this] {
      const auto& sh = config_.shift;
      facility_->start_run(config_.facility.experiment_id, sh.rate_hz, sim_seconds(sh.duration_s));
    });

  for (const auto& b : config_.background)
    for (int k = 0; k < b.count; ++k)
      kernel_.schedule(at_seconds(b.at_s + k * b.every_s), "background job", [this, b, reservations] {
        JobRequest req;
        req.nodes = b.nodes;
        req.duration_s = b.duration_s;
        req.exit_after_warning_s = b.exit_after_warning_s;
        req.label = "background";
        req.target = b.kind == TargetKind::batch ? Target::batch()
                     : b.kind == TargetKind::preemptible
                         ? Target::preemptible(reservations.at(static_cast<std::size_t>(b.reservation)))
                         : Target::urgent(reservations.at(static_cast<std::size_t>(b.reservation)));
        scheduler_->submit(req);
      });

  mover_->start();
}

std::size_t Simulation::run_until(SimTime t) { return kernel_.run_until(std::max(t, kernel_.now())); }

nlohmann::json Simulation::summary() const {
  json runs = json::array();
  std::int64_t images = 0, bytes = 0;
  double max_transfer = 0.0;
  for (auto id : facility_->run_ids()) {
    const auto& run = facility_->run(id);
    if (run.state == RunState::recording) continue;
    images += run.image_count;
    bytes += run.total_bytes();
    json entry{{"run", id}, {"images", run.image_count}, {"bytes", run.total_bytes()}, {"state", to_string(run.state)}};
    const auto concluded = mover_->run_concluded_at(id);
    const auto completed = mover_->run_completed_at(id);
    if (concluded && completed) {
      const double d = to_seconds(*completed - *concluded);
      max_transfer = std::max(max_transfer, d);
      entry["transfer_s"] = d;
      entry["transfer_rate_gbps"] = d > 0 ? static_cast<double>(run.total_bytes()) / d / 1e9 : 0.0;
    }
    runs.push_back(entry);
  }

  json survivors = json::object();
  for (const auto& [tid, t] : campaign_->trials()) {
    const auto c = store_->query_progress({std::nullopt, tid, std::nullopt});
    json per = json::object();
    for (auto s : kStages)
      per[std::string(to_string(s))] = {{"processed", c.at(s).processed}, {"succeeded", c.at(s).succeeded}};
    survivors[std::to_string(tid)] = per;
  }

  std::map<std::string, int> job_states;
  std::map<std::string, int> job_stages;
  for (const auto& [id, spec] : orchestrator_->specs()) {
    ++job_states[std::string(to_string(scheduler_->job(id).state))];
    ++job_stages[std::string(to_string(spec.stage))];
  }

  json util = json::object();
  {
    double res = 0, pre = 0, bat = 0;
    for (const auto& a : scheduler_->allocations()) {
      const double s = to_seconds(a.end - a.start);
      (a.kind == TargetKind::reservation ? res : a.kind == TargetKind::preemptible ? pre : bat) += s;
    }
    const double h = std::max(to_seconds(kernel_.now()), 1e-9);
    util = {{"reservation_nodes_mean", res / h}, {"preemptible_nodes_mean", pre / h}, {"batch_nodes_mean", bat / h},
            {"total_nodes", scheduler_->total_nodes()}};
  }

  const auto series = store_->commit_rate_series(1.0);
  const std::int64_t peak = series.records.empty() ? 0 : *std::max_element(series.records.begin(), series.records.end());

  json turnaround = nullptr;
  try {
    turnaround = to_json(orchestrator_->turnaround_report());
  } catch (const EmptyResult&) {
  }

  const double rank_s = orchestrator_->rank_seconds();
  return {{"scenario", config_.name},
          {"seed", config_.seed},
          {"horizon_s", to_seconds(horizon_)},
          {"runs", {{"count", runs.size()}, {"images", images}, {"bytes", bytes}, {"detail", runs}}},
          {"transfers", {{"max_duration_s", max_transfer}, {"records", mover_->records().size()}}},
          {"survivors", survivors},
          {"jobs", {{"total", orchestrator_->specs().size()}, {"by_state", job_states}, {"by_stage", job_stages}}},
          {"turnaround", turnaround},
          {"utilization", util},
          {"store",
           {{"records", store_->size()},
            {"transactions", store_->transactions()},
            {"connection_high_water", store_->connection_high_water()},
            {"peak_records_per_s", peak}}},
          {"db_overhead", rank_s > 0 ? orchestrator_->db_time_s() / rank_s : 0.0}};
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

}  // namespace

void Simulation::write_artifacts(const std::filesystem::path& out) const {
  std::filesystem::create_directories(out);
  write_file(out / "summary.json", summary().dump(2) + "\n");
  write_file(out / "snapshot.json", snapshot().dump(2) + "\n");
  write_file(out / "scenario.json", config_.source.dump(2) + "\n");

  if (!persist_dir_ || std::filesystem::weakly_canonical(*persist_dir_) != std::filesystem::weakly_canonical(out)) {
    for (const auto& topic : bus_->topic_names()) {
      std::string text;
      for (const auto& ev : bus_->events(topic)) text += format_record(ev) + "\n";
      write_file(out / "events" / (topic + ".log"), text);
    }
  }

  std::string traces;
  bool header = true;
  json jobs = json::array();
  for (const auto& [id, spec] : orchestrator_->specs()) {
    auto j = to_json(spec);
    j["state"] = to_string(scheduler_->job(id).state);
    if (const auto* r = orchestrator_->result(id)) {
      traces += trace_csv(*r, header);
      header = false;
      j["start_ns"] = to_ns(r->start);
      j["makespan_s"] = r->makespan_s;
      j["survivors"] = r->survivor_count();
    }
    jobs.push_back(j);
  }
  if (header) traces = "job_id,image_id,rank,stage,start_ns,end_ns,outcome\n";
  write_file(out / "traces.csv", traces);
  write_file(out / "jobs.json", jobs.dump(2) + "\n");

  const auto reports = out / "reports";
  try {
    const auto rep = orchestrator_->turnaround_report();
    write_file(reports / "turnaround.csv", histogram_csv(rep.histogram, "delta_s"));
    write_file(reports / "turnaround.svg", histogram_svg(rep.histogram, "Turnaround (record to first processing)",
                                                         "minutes x 60 (s)", colors::indexing));
  } catch (const EmptyResult&) {
  }
  const auto rate = mover_->throughput_series(10.0);
  std::vector<double> gbps(rate.size());
  std::transform(rate.begin(), rate.end(), gbps.begin(), [](double b) { return b / 1e9; });
  write_file(reports / "transfer_rate.csv", series_csv(gbps, 10.0, "gb_per_s"));
  write_file(reports / "transfer_rate.svg", series_svg(gbps, 10.0, "Transfer rate", "GB/s"));
  const auto util = scheduler_->utilization_series(60.0);
  write_file(reports / "utilization.csv", utilization_csv(util));
  write_file(reports / "utilization.svg", utilization_svg(util, scheduler_->total_nodes()));
  const auto commits = store_->commit_rate_series(1.0);
  std::vector<double> rps(commits.records.begin(), commits.records.end());
  write_file(reports / "commit_rate.csv", series_csv(rps, 1.0, "records_per_s"));
  write_file(reports / "commit_rate.svg", series_svg(rps, 1.0, "Store commits", "records/s"));

  std::vector<ImageTrace> all;
  for (const auto& [id, _] : orchestrator_->specs())
    if (const auto* r = orchestrator_->result(id)) all.insert(all.end(), r->traces.begin(), r->traces.end());
  for (auto s : kStages) {
    const auto h = duration_pdf(all, s, 0.1);
    const std::string name(to_string(s));
    write_file(reports / (name + ".pdf.csv"), histogram_csv(h, "duration_s"));
    write_file(reports / (name + ".pdf.svg"), histogram_svg(h, name + " time per image", "seconds", stage_color(s)));
  }
  for (const auto& [id, _] : orchestrator_->specs())
    if (const auto* r = orchestrator_->result(id)) {
      const auto doc = weather_plot(*r);
      write_file(reports / (std::to_string(id) + ".weather.csv"), timeline_csv(doc));
      write_file(reports / (std::to_string(id) + ".weather.svg"), timeline_svg(doc));
      break;
    }
}

nlohmann::json run_scenario(const ScenarioConfig& config, const std::filesystem::path& out_dir) {
  Simulation sim(config, out_dir);
  sim.run();
  sim.write_artifacts(out_dir);
  return sim.summary();
}

// ---------------------------------------------------------------------------
// Replay

std::vector<BusEvent> merge_topics(std::vector<std::vector<BusEvent>> per_topic) {
  const auto order = EventBus::default_topics();
  auto rank = [&](const std::string& t) {
    const auto it = std::find(order.begin(), order.end(), t);
    return it == order.end() ? order.size() : static_cast<std::size_t>(it - order.begin());
  };
  std::vector<BusEvent> all;
  for (auto& v : per_topic) std::move(v.begin(), v.end(), std::back_inserter(all));
  std::stable_sort(all.begin(), all.end(), [&](const BusEvent& a, const BusEvent& b) {
    if (a.time != b.time) return a.time < b.time;
    const auto ra = rank(a.topic), rb = rank(b.topic);
    if (ra != rb) return ra < rb;
    if (a.topic != b.topic) return a.topic < b.topic;
    return a.offset < b.offset;
  });
  return all;
}

nlohmann::json replay_events(const std::vector<BusEvent>& events) {
  struct RunRow {
    RunState state = RunState::concluded;
    std::int64_t images = 0;
    std::int64_t concluded_ns = 0;
    std::set<std::string> tags;
  };
  struct JobRow {
    json doc;
    std::string state = "pending";
  };
  struct TrialRow {
    json params;
    bool active = true;
    bool frozen = false;
  };
  std::map<RunId, RunRow> runs;
  std::map<TrialId, TrialRow> trials;
  std::map<DatasetId, json> datasets;
  std::map<JobId, JobRow> jobs;
  std::map<JobId, json> committed;

  auto advance = [&](RunId run, RunState s) {
    auto it = runs.find(run);
    if (it != runs.end() && static_cast<int>(s) > static_cast<int>(it->second.state)) it->second.state = s;
  };

  for (const auto& ev : events) {
    const auto& p = ev.payload;
    switch (ev.kind) {
      case EventKind::run_concluded: {
        auto& r = runs[p.at("run").get<RunId>()];
        r.images = p.at("image_count").get<std::int64_t>();
        r.concluded_ns = p.at("end_ns").get<std::int64_t>();
        break;
      }
      case EventKind::transfer_started:
        advance(p.at("run").get<RunId>(), RunState::transferring);
        break;
      case EventKind::transfer_completed:
        if (p.value("scope", "") == "run" && p.value("status", "") == "available_remote")
          advance(p.at("run").get<RunId>(), RunState::available_remote);
        break;
      case EventKind::tag_added: {
        auto it = runs.find(p.at("run").get<RunId>());
        if (it != runs.end())
          for (const auto& t : p.at("tags")) it->second.tags.insert(t.get<std::string>());
        break;
      }
      case EventKind::trial_created: {
        const auto id = p.at("trial").get<TrialId>();
        trials[id] = {p.at("params"), true, false};
        if (p.at("params").contains("supersedes")) {
          const auto old = p.at("params").at("supersedes").get<TrialId>();
          if (trials.contains(old)) trials[old].active = false;
        }
        break;
      }
      case EventKind::dataset_created: {
        const auto id = p.at("dataset").get<DatasetId>();
        datasets[id] = {{"dataset", id}, {"name", p.at("name")}, {"expr", p.at("expr")}};
        break;
      }
      case EventKind::job_submitted: {
        const auto id = p.at("job").get<JobId>();
        jobs[id].doc = {{"job", id},           {"stage", p.at("stage")}, {"run", p.at("run")},
                        {"trial", p.at("trial")}, {"dataset", p.at("dataset")}, {"nodes", p.at("nodes")}};
        if (auto it = trials.find(p.at("trial").get<TrialId>()); it != trials.end()) it->second.frozen = true;
        break;
      }
      case EventKind::job_state_changed: {
        const auto id = p.at("job").get<JobId>();
        if (auto it = jobs.find(id); it != jobs.end()) it->second.state = p.at("state").get<std::string>();
        if (p.contains("committed")) committed[id] = p.at("committed");
        break;
      }
      case EventKind::job_progress:
        committed[p.at("job").get<JobId>()] = p.at("committed");
        break;
      case EventKind::file_created:
        break;
    }
  }

  json out_runs = json::array();
  for (const auto& [id, r] : runs)
    out_runs.push_back({{"run", id},
                        {"state", to_string(r.state)},
                        {"images", r.images},
                        {"concluded_ns", r.concluded_ns},
                        {"tags", r.tags}});
  json out_trials = json::array();
  for (const auto& [id, t] : trials)
    out_trials.push_back({{"trial", id}, {"params", t.params}, {"active", t.active}, {"frozen", t.frozen}});
  json out_datasets = json::array();
  for (const auto& [id, d] : datasets) out_datasets.push_back(d);
  json out_jobs = json::array();
  std::map<std::pair<RunId, TrialId>, ProgressCounts> progress;
  for (const auto& [id, j] : jobs) {
    auto doc = j.doc;
    doc["state"] = j.state;
    out_jobs.push_back(doc);
    const auto key = std::make_pair(doc.at("run").get<RunId>(), doc.at("trial").get<TrialId>());
    auto& pc = progress[key];
    if (const auto it = committed.find(id); it != committed.end()) {
      auto& sc = pc.stages[stage_index(parse_stage(doc.at("stage").get<std::string>()))];
      sc.processed += it->second.at("processed").get<std::int64_t>();
      sc.succeeded += it->second.at("succeeded").get<std::int64_t>();
      sc.rejected += it->second.at("rejected").get<std::int64_t>();
      sc.spots += it->second.at("spots").get<std::int64_t>();
      pc.records += it->second.at("processed").get<std::int64_t>();
    }
  }
  json out_progress = json::array();
  for (const auto& [key, c] : progress) {
    if (c.records == 0) continue;
    out_progress.push_back({{"run", key.first}, {"trial", key.second}, {"counts", to_json(c)}});
  }
  return {{"runs", out_runs}, {"trials", out_trials}, {"datasets", out_datasets}, {"jobs", out_jobs},
          {"progress", out_progress}};
}

nlohmann::json replay(const std::filesystem::path& log) {
  std::vector<std::vector<BusEvent>> per_topic;
  if (std::filesystem::is_directory(log)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(log))
      if (entry.path().extension() == ".log") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) per_topic.push_back(read_log(f, f.stem().string()));
  } else {
    if (!std::filesystem::exists(log)) throw std::runtime_error("no such log: " + log.string());
    per_topic.push_back(read_log(log, log.stem().string()));
  }
  return replay_events(merge_topics(std::move(per_topic)));
}

}  // namespace beamtime
