#include "beamtime/orchestrator.hpp"

#include <algorithm>
#include <cmath>

#include "beamtime/errors.hpp"

namespace beamtime {

nlohmann::json to_json(const JobSpec& s) {
  nlohmann::json j{{"job", s.job_id},
                   {"stage", to_string(s.stage)},
                   {"run", s.run_id},
                   {"dataset", s.dataset_id},
                   {"trial", s.trial_id},
                   {"nodes", s.nodes},
                   {"ranks", s.ranks()},
                   {"images", s.input.size()},
                   {"reprocess", s.reprocess},
                   {"target", to_string(s.target.kind)}};
  if (s.target.kind != TargetKind::batch) j["reservation"] = s.target.reservation;
  if (s.upstream) j["upstream"] = *s.upstream;
  return j;
}

nlohmann::json to_json(const TurnaroundReport& r, bool with_samples) {
  nlohmann::json j{{"count", r.samples.size()}, {"min_s", r.min_s},   {"median_s", r.median_s},
                   {"mean_s", r.mean_s},        {"max_s", r.max_s},   {"band_10_20_min", r.band_10_20},
                   {"bin_s", r.histogram.bin_s}, {"counts", r.histogram.counts}};
  if (with_samples) {
    auto& s = j["samples"] = nlohmann::json::array();
    for (const auto& x : r.samples)
      s.push_back({{"image", x.image_id},
                   {"recorded_ns", to_ns(x.recorded_at)},
                   {"first_processed_ns", to_ns(x.first_processed_at)},
                   {"delta_s", x.delta_s}});
  }
  return j;
}

Orchestrator::Orchestrator(Kernel& kernel, EventBus& bus, Facility& facility, Campaign& campaign, Scheduler& scheduler,
                           Store& store, OrchestratorConfig config)
    : kernel_(kernel),
      bus_(bus),
      facility_(facility),
      campaign_(campaign),
      scheduler_(scheduler),
      store_(store),
      config_(std::move(config)) {
  for (std::size_t s = 0; s < 4; ++s) {
    if (config_.profiles[s].stage != kStages[s]) throw ProfileInvalid("profiles must be ordered spotfinding..integration");
    validate(config_.profiles[s]);
  }
  if (config_.ranks_per_node < 1) throw ValidationError("ranks_per_node must be >= 1");
  if (!(config_.heartbeat_s > 0.0)) throw ValidationError("heartbeat_s must be positive");
}

void Orchestrator::start() {
  if (started_) return;
  started_ = true;
  bus_.add_observer([this](const BusEvent& ev) {
    if (ev.topic == topics::runs && ev.kind == EventKind::run_concluded) {
      campaign_.register_run(ev.payload.at("run").get<RunId>());
    } else if (ev.topic == topics::transfers && ev.kind == EventKind::transfer_completed &&
               ev.payload.value("scope", "") == "run") {
      request_sync();
    } else if (ev.topic == topics::campaign) {
      if (ev.kind == EventKind::trial_created) {
        const auto trial = ev.payload.at("trial").get<TrialId>();
        const auto& params = campaign_.trial(trial).params;
        if (config_.cancel_superseded && params.supersedes) {
          for (const auto& [id, spec] : specs_)
            if (spec.trial_id == *params.supersedes && scheduler_.job(id).state == JobState::pending)
              scheduler_.cancel(id);
        }
        kernel_.schedule(kernel_.now(), "orchestrator trial plan", [this, trial] { on_trial_created(trial); });
      } else {
        request_sync();
      }
    }
  });
  scheduler_.add_listener([this](const SchedJob& job, JobState) {
    if (!specs_.contains(job.id)) return;
    const auto id = job.id;
    const auto state = job.state;
    kernel_.schedule(kernel_.now(), "orchestrator job " + std::to_string(id) + " " + std::string(to_string(state)),
                     [this, id, state] { on_job_change(id, state); });
  });
  kernel_.schedule(kernel_.now(), "orchestrator heartbeat", [this] { heartbeat(); });
}

void Orchestrator::heartbeat() {
  sync_cycle();
  kernel_.schedule_in(sim_seconds(config_.heartbeat_s), "orchestrator heartbeat", [this] { heartbeat(); });
}

void Orchestrator::request_sync() {
  if (sync_scheduled_) return;
  sync_scheduled_ = true;
  kernel_.schedule(kernel_.now(), "orchestrator sync", [this] { sync_cycle(); });
}

StageProfile Orchestrator::profile_for(Stage stage, TrialId trial) const {
  StageProfile p = config_.profiles[stage_index(stage)];
  const auto& params = campaign_.trial(trial).params;
  if (const auto it = params.stages.find(stage); it != params.stages.end()) {
    if (it->second.success_rate) p.success_rate = *it->second.success_rate;
    if (it->second.duration) p.duration = *it->second.duration;
  }
  return p;
}

int Orchestrator::nodes_for(Stage stage, TrialId trial, int upstream_nodes) const {
  int n = std::max(1, static_cast<int>(std::lround(config_.stage_nodes[stage_index(stage)] * config_.node_scale)));
  const auto& params = campaign_.trial(trial).params;
  if (const auto it = params.stages.find(stage); it != params.stages.end() && it->second.nodes) n = *it->second.nodes;
  if (upstream_nodes > 0) n = std::min(n, upstream_nodes);
  int cap = scheduler_.total_nodes();
  if (config_.target.kind != TargetKind::batch)
    cap = scheduler_.reservations().at(config_.target.reservation).node_count;
  return std::clamp(n, 1, cap);
}

JobSpec& Orchestrator::submit(JobSpec spec, std::optional<JobId> resubmit_of) {
  const auto profile = profile_for(spec.stage, spec.trial_id);
  PoolOptions opts;
  opts.trial = spec.trial_id;
  opts.seed = config_.seed;
  opts.io_mode = config_.io_mode;
  opts.shared_open_s = config_.shared_open_s;
  opts.group_size = config_.group_size;
  opts.flush = config_.flush;
  opts.db = config_.db;
  auto result = run_stage_job(spec.input, spec.ranks(), profile, opts);

  JobRequest req;
  req.nodes = spec.nodes;
  req.target = spec.target;
  req.duration_s = result.makespan_s;
  req.priority = config_.live_priority && !spec.reprocess ? 1 : 0;
  req.label = std::string(to_string(spec.stage)) + " run " + std::to_string(spec.run_id) + " trial " +
              std::to_string(spec.trial_id);
  const JobId id = resubmit_of ? scheduler_.resubmit(*resubmit_of, req) : scheduler_.submit(req);

  spec.job_id = id;
  if (spec.lineage < 0) {
    spec.lineage = id;
    lineages_[id];
  }
  result.job_id = id;
  for (auto& rec : result.records) rec.job = id;
  planned_.emplace(id, std::move(result));
  campaign_.freeze_trial(spec.trial_id);

  auto payload = to_json(spec);
  payload["duration_s"] = req.duration_s;
  payload["lineage"] = spec.lineage;
  if (resubmit_of) payload["resubmit_of"] = *resubmit_of;
  bus_.publish(std::string(topics::jobs), EventKind::job_submitted, payload, kernel_.now());
  return specs_.emplace(id, std::move(spec)).first->second;
}

void Orchestrator::plan_trial(TrialId trial, std::vector<JobSpec>& out) {
  const auto& t = campaign_.trial(trial);
  if (!t.active) return;
  std::map<RunId, DatasetId> candidates;
  for (auto d : t.params.datasets)
    for (auto run : campaign_.resolve_dataset(d)) {
      if (!facility_.has_run(run) || facility_.run(run).state != RunState::available_remote) continue;
      if (covered_.contains({run, trial})) continue;
      candidates.emplace(run, d);  // first listed dataset wins
    }
  for (const auto& [run, dataset] : candidates) {
    JobSpec spec;
    spec.stage = Stage::spotfinding;
    spec.dataset_id = dataset;
    spec.trial_id = trial;
    spec.run_id = run;
    spec.nodes = nodes_for(Stage::spotfinding, trial, 0);
    spec.ranks_per_node = config_.ranks_per_node;
    spec.input = facility_.image_refs(run);
    spec.reprocess = facility_.run(run).end < t.created_at;
    spec.target = config_.target;
    covered_.emplace(std::make_pair(run, trial), dataset);
    out.push_back(submit(std::move(spec)));
  }
}

void Orchestrator::chain(JobId id, std::vector<JobSpec>& out) {
  chain_ready_.erase(id);
  if (!chained_.insert(id).second) return;
  const auto& spec = specs_.at(id);
  if (spec.stage == Stage::integration || stage_index(spec.stage) >= stage_index(config_.last_stage)) return;
  auto survivors = lineages_.at(spec.lineage).survivors;
  std::sort(survivors.begin(), survivors.end(), [](const ImageRef& a, const ImageRef& b) { return a.index < b.index; });
  if (survivors.empty()) {
    exhausted_.emplace(std::make_pair(spec.run_id, spec.trial_id), spec.stage);
    return;
  }
  JobSpec next;
  next.stage = kStages[stage_index(spec.stage) + 1];
  next.dataset_id = spec.dataset_id;
  next.trial_id = spec.trial_id;
  next.run_id = spec.run_id;
  next.nodes = nodes_for(next.stage, spec.trial_id, spec.nodes);
  next.ranks_per_node = spec.ranks_per_node;
  next.input = std::move(survivors);
  next.reprocess = spec.reprocess;
  next.upstream = id;
  next.target = spec.target;
  out.push_back(submit(std::move(next)));
}

std::vector<JobSpec> Orchestrator::sync_cycle() {
  sync_scheduled_ = false;
  std::vector<JobSpec> out;
  for (const auto& [id, t] : campaign_.trials()) plan_trial(id, out);
  const std::vector<JobId> ready(chain_ready_.begin(), chain_ready_.end());
  for (auto id : ready) chain(id, out);
  return out;
}

std::vector<JobSpec> Orchestrator::on_trial_created(TrialId trial) {
  std::vector<JobSpec> out;
  plan_trial(trial, out);
  return out;
}

void Orchestrator::on_job_change(JobId id, JobState state) {
  auto& spec = specs_.at(id);
  nlohmann::json payload{{"job", id}, {"state", to_string(state)}};
  if (state == JobState::running) {
    on_started(spec);
  } else if (state == JobState::done || state == JobState::preempted || state == JobState::failed) {
    payload["committed"] = committed_counts(id);
    bus_.publish(std::string(topics::jobs), EventKind::job_state_changed, payload, kernel_.now());
    on_finished(spec, state);
    return;
  }
  bus_.publish(std::string(topics::jobs), EventKind::job_state_changed, payload, kernel_.now());
}

void Orchestrator::on_started(JobSpec& spec) {
  const auto id = spec.job_id;
  auto node = planned_.extract(id);
  if (node.empty()) return;
  auto& r = results_.emplace(id, std::move(node.mapped())).first->second;
  shift(r, *scheduler_.job(id).start - SimTime{});
  auto& live = live_[id];
  live.conns.assign(r.flushes.size(), std::nullopt);
  live.committed.assign(r.flushes.size(), false);
  for (std::size_t t = 0; t < r.traces.size(); ++t) live.trace_of.emplace(r.traces[t].image.index, t);
  for (std::size_t i = 0; i < r.flushes.size(); ++i) {
    live.handles.push_back(kernel_.schedule(r.flushes[i].begin, "flush open", [this, id, i] {
      auto& l = live_.at(id);
      try {
        l.conns[i] = store_.connect(kernel_.now());
      } catch (const StoreUnavailable&) {
        l.conns[i].reset();
      }
    }));
    live.handles.push_back(
        kernel_.schedule(r.flushes[i].end, "flush commit", [this, id, i] { commit_flush(id, i); }));
  }
}

void Orchestrator::commit_flush(JobId id, std::size_t i) {
  auto& live = live_.at(id);
  if (live.committed[i]) return;
  const auto& r = results_.at(id);
  const auto& plan = r.flushes[i];
  auto retry = [&] {
    live.handles.push_back(kernel_.schedule_in(std::chrono::seconds(1), "flush retry", [this, id, i] { commit_flush(id, i); }));
  };
  if (!live.conns[i]) {
    try {
      live.conns[i] = store_.connect(kernel_.now());
    } catch (const StoreUnavailable&) {
      retry();
      return;
    }
  }
  std::vector<ProgressRecord> batch;
  batch.reserve(plan.records.size());
  for (auto idx : plan.records) batch.push_back(r.records[idx]);
  const auto conn = *live.conns[i];
  live.conns[i].reset();
  try {
    store_.commit(conn, batch, kernel_.now());
  } catch (const StoreUnavailable&) {
    store_.close(conn);
    retry();
    return;
  } catch (const DuplicateRecord&) {
    store_.close(conn);
    live.committed[i] = true;
    return;
  }
  store_.close(conn);
  live.committed[i] = true;

  const auto& spec = specs_.at(id);
  auto& lineage = lineages_.at(spec.lineage);
  auto& counts = job_counts_[id];
  for (auto idx : plan.records) {
    const auto& rec = r.records[idx];
    lineage.committed.insert(rec.image_index);
    ++counts.processed;
    counts.spots += rec.n_spots;
    if (rec.outcome == Outcome::success) {
      ++counts.succeeded;
      lineage.survivors.push_back(r.traces[live.trace_of.at(rec.image_index)].image);
    } else {
      ++counts.rejected;
    }
  }
  bus_.publish(std::string(topics::jobs), EventKind::job_progress, {{"job", id}, {"committed", committed_counts(id)}},
               kernel_.now());
}

StageCounts Orchestrator::job_committed(JobId id) const {
  const auto it = job_counts_.find(id);
  return it == job_counts_.end() ? StageCounts{} : it->second;
}

JobSpec Orchestrator::submit_manual(Stage stage, DatasetId dataset, TrialId trial, RunId run, int nodes, Target target) {
  campaign_.trial(trial);
  campaign_.dataset(dataset);
  if (!facility_.has_run(run)) throw UnknownRun("unknown run " + std::to_string(run));
  if (facility_.run(run).state != RunState::available_remote)
    throw InvalidState("run " + std::to_string(run) + " is not available at the compute site yet");
  if (nodes < 1) throw ValidationError("nodes must be >= 1");
  if (nodes > scheduler_.total_nodes()) throw NodesExceedPool("job asks for more nodes than the pool has");
  JobSpec spec;
  spec.stage = stage;
  spec.dataset_id = dataset;
  spec.trial_id = trial;
  spec.run_id = run;
  spec.nodes = nodes;
  spec.ranks_per_node = config_.ranks_per_node;
  spec.input = facility_.image_refs(run);
  spec.reprocess = true;
  spec.target = target;
  return submit(std::move(spec));
}

nlohmann::json Orchestrator::committed_counts(JobId id) const {
  const StageCounts c = job_committed(id);
  return {{"processed", c.processed}, {"succeeded", c.succeeded}, {"rejected", c.rejected}, {"spots", c.spots}};
}

void Orchestrator::note_turnaround(const JobResult& r, SimTime until) {
  for (const auto& t : r.traces)
    for (const auto& e : t.entries) {
      if (e.end > until) continue;
      const auto key = std::make_pair(t.image.run_id, t.image.index);
      auto [it, inserted] = first_processed_.emplace(key, std::make_pair(t.image.recorded_at, e.end));
      if (!inserted && e.end < it->second.second) it->second.second = e.end;
    }
}

void Orchestrator::on_finished(JobSpec& spec, JobState state) {
  const auto id = spec.job_id;
  const auto& sj = scheduler_.job(id);
  const SimTime end = sj.end.value_or(kernel_.now());

  if (const auto rit = results_.find(id); rit != results_.end()) {
    const auto& r = rit->second;
    note_turnaround(r, end);
    if (sj.start) rank_seconds_ += to_seconds(end - *sj.start) * std::max(r.ranks - 1, 0);
    if (state == JobState::done) db_time_s_ += r.db_time_s;
    if (state != JobState::done) {
      auto& live = live_.at(id);
      for (auto h : live.handles) kernel_.cancel(h);
      for (auto& c : live.conns)
        if (c) store_.close(*c);
      live.conns.assign(live.conns.size(), std::nullopt);
    }
  }

  if (state == JobState::done) {
    lineages_.at(spec.lineage).finished = true;
    chain_ready_.insert(id);
    request_sync();
    return;
  }

  const auto& lineage = lineages_.at(spec.lineage);
  std::vector<ImageRef> remaining;
  for (const auto& img : spec.input)
    if (!lineage.committed.contains(img.index)) remaining.push_back(img);

  if (state == JobState::failed) {
    // Expired before starting: the reservation window closed. Fall back to the batch queue.
    const bool expired = spec.target.kind != TargetKind::batch && !sj.start &&
                         scheduler_.reservations().at(spec.target.reservation).t1 <= kernel_.now();
    if (!expired) return;
    JobSpec again = spec;
    again.input = std::move(remaining);
    again.target = Target::batch();
    submit(std::move(again), id);
    return;
  }

  // Preempted: unflushed work is lost; requeue what is not yet committed.
  if (remaining.empty()) {
    chain_ready_.insert(id);
    request_sync();
    return;
  }
  JobSpec again = spec;
  again.input = std::move(remaining);
  submit(std::move(again), id);
}

const JobSpec& Orchestrator::spec(JobId id) const {
  const auto it = specs_.find(id);
  if (it == specs_.end()) throw UnknownJob("unknown job " + std::to_string(id));
  return it->second;
}

const JobResult* Orchestrator::result(JobId id) const {
  const auto it = results_.find(id);
  return it == results_.end() ? nullptr : &it->second;
}

std::vector<JobId> Orchestrator::job_ids() const {
  std::vector<JobId> out;
  for (const auto& [id, _] : specs_) out.push_back(id);
  return out;
}

std::optional<Stage> Orchestrator::exhausted(RunId run, TrialId trial) const {
  const auto it = exhausted_.find({run, trial});
  if (it == exhausted_.end()) return std::nullopt;
  return it->second;
}

TurnaroundReport Orchestrator::turnaround_report() const {
  if (first_processed_.empty()) throw EmptyResult("no image has completed a stage yet");
  TurnaroundReport rep;
  std::vector<double> deltas;
  for (const auto& [key, times] : first_processed_) {
    const double d = to_seconds(times.second - times.first);
    rep.samples.push_back({std::to_string(key.first) + ":" + std::to_string(key.second), times.first, times.second, d});
    deltas.push_back(d);
  }
  rep.histogram = histogram(deltas, 60.0);
  auto sorted = deltas;
  std::sort(sorted.begin(), sorted.end());
  rep.min_s = sorted.front();
  rep.max_s = sorted.back();
  const auto n = sorted.size();
  rep.median_s = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double sum = 0.0;
  std::size_t band = 0;
  for (double d : deltas) {
    sum += d;
    if (d >= 600.0 && d < 1200.0) ++band;
  }
  rep.mean_s = sum / static_cast<double>(n);
  rep.band_10_20 = static_cast<double>(band) / static_cast<double>(n);
  return rep;
}

nlohmann::json Orchestrator::snapshot() const {
  nlohmann::json runs = nlohmann::json::array();
  for (auto id : facility_.run_ids()) {
    const auto& run = facility_.run(id);
    if (run.state == RunState::recording) continue;
    nlohmann::json tags = nlohmann::json::array();
    if (campaign_.has_run(id))
      for (const auto& t : campaign_.tags_of(id)) tags.push_back(t);
    runs.push_back({{"run", id},
                    {"state", to_string(run.state)},
                    {"images", run.image_count},
                    {"concluded_ns", to_ns(run.end)},
                    {"tags", tags}});
  }
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& [id, t] : campaign_.trials())
    trials.push_back({{"trial", id}, {"params", t.raw_params}, {"active", t.active}, {"frozen", t.frozen}});
  nlohmann::json datasets = nlohmann::json::array();
  for (const auto& [id, d] : campaign_.datasets())
    datasets.push_back({{"dataset", id}, {"name", d.name}, {"expr", to_json(d.expr)}});

  nlohmann::json jobs = nlohmann::json::array();
  std::set<std::pair<RunId, TrialId>> pairs;
  for (const auto& [id, s] : specs_) {
    jobs.push_back({{"job", id},
                    {"stage", to_string(s.stage)},
                    {"run", s.run_id},
                    {"trial", s.trial_id},
                    {"dataset", s.dataset_id},
                    {"nodes", s.nodes},
                    {"state", to_string(scheduler_.job(id).state)}});
    pairs.insert({s.run_id, s.trial_id});
  }
  nlohmann::json progress = nlohmann::json::array();
  for (const auto& [run, trial] : pairs) {
    const auto c = store_.query_progress({run, trial, std::nullopt});
    if (c.records == 0) continue;
    progress.push_back({{"run", run}, {"trial", trial}, {"counts", to_json(c)}});
  }
  return {{"runs", runs}, {"trials", trials}, {"datasets", datasets}, {"jobs", jobs}, {"progress", progress}};
}

}  // namespace beamtime
