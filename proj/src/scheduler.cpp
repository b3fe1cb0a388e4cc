#include "beamtime/scheduler.hpp"

#include <algorithm>
#include <cmath>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string_view to_string(TargetKind k) {
  switch (k) {
    case TargetKind::reservation: return "reservation";
    case TargetKind::preemptible: return "preemptible";
    case TargetKind::batch: return "batch";
  }
  return "unknown";
}

std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::pending: return "pending";
    case JobState::running: return "running";
    case JobState::preempt_warned: return "preempt_warned";
    case JobState::preempted: return "preempted";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

JobState parse_job_state(std::string_view s) {
  for (auto st : {JobState::pending, JobState::running, JobState::preempt_warned, JobState::preempted,
                  JobState::done, JobState::failed})
    if (to_string(st) == s) return st;
  throw ValidationError("unknown job state '" + std::string(s) + "'");
}

TargetKind parse_target_kind(std::string_view s) {
  for (auto k : {TargetKind::reservation, TargetKind::preemptible, TargetKind::batch})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown target '" + std::string(s) + "'");
}

std::string_view to_string(DecisionKind k) {
  switch (k) {
    case DecisionKind::start: return "start";
    case DecisionKind::warn: return "warn";
    case DecisionKind::kill: return "kill";
    case DecisionKind::voluntary_exit: return "voluntary_exit";
    case DecisionKind::complete: return "complete";
    case DecisionKind::expire: return "expire";
  }
  return "unknown";
}

Scheduler::Scheduler(Kernel& kernel, SchedulerConfig config)
    : kernel_(kernel), config_(config), node_owner_(static_cast<std::size_t>(config.total_nodes)) {
  if (config_.total_nodes < 1) throw ValidationError("total_nodes must be >= 1");
  if (!(config_.default_grace_s >= 0.0)) throw ValidationError("grace must be >= 0");
}

ReservationId Scheduler::create_reservation(int node_count, SimTime t0, SimTime t1, std::optional<double> grace_s) {
  if (t1 <= t0) throw ValidationError("reservation window must have t1 > t0");
  if (node_count < 1) throw ValidationError("reservation needs at least one node");
  const double grace = grace_s.value_or(config_.default_grace_s);
  if (!(grace >= 0.0)) throw ValidationError("grace_s must be >= 0");
  if (node_count > config_.total_nodes) throw CapacityExceeded("reservation larger than the pool");

  std::vector<bool> taken(static_cast<std::size_t>(config_.total_nodes), false);
  for (const auto& [id, r] : reservations_)
    if (r.t0 < t1 && t0 < r.t1)
      for (int n : r.nodes) taken[static_cast<std::size_t>(n)] = true;
  Reservation res{next_reservation_, node_count, t0, t1, grace, {}};
  for (int n = 0; n < config_.total_nodes && static_cast<int>(res.nodes.size()) < node_count; ++n)
    if (!taken[static_cast<std::size_t>(n)]) res.nodes.push_back(n);
  if (static_cast<int>(res.nodes.size()) < node_count)
    throw CapacityExceeded("only " + std::to_string(res.nodes.size()) + " nodes free in the requested window");

  const auto id = next_reservation_++;
  reservations_.emplace(id, std::move(res));
  const auto& stored = reservations_.at(id);
  if (stored.t0 >= kernel_.now()) kernel_.schedule(stored.t0, "reservation window opens", [this] { request_tick(); });
  if (stored.t1 >= kernel_.now()) kernel_.schedule(stored.t1, "reservation window closes", [this] { request_tick(); });
  request_tick();
  return id;
}

JobId Scheduler::submit(JobRequest request) {
  if (request.nodes < 1) throw ValidationError("job needs at least one node");
  if (!(request.duration_s >= 0.0)) throw ValidationError("job duration must be >= 0");
  if (request.nodes > config_.total_nodes) throw NodesExceedPool("job asks for more nodes than the pool has");
  if (request.target.kind != TargetKind::batch) {
    const auto it = reservations_.find(request.target.reservation);
    if (it == reservations_.end())
      throw UnknownReservation("unknown reservation " + std::to_string(request.target.reservation));
    if (request.nodes > it->second.node_count) throw NodesExceedPool("job asks for more nodes than the reservation holds");
  }
  SchedJob job;
  job.id = next_job_++;
  job.request = std::move(request);
  job.submit = kernel_.now();
  job.fifo_seq = next_fifo_++;
  const auto id = job.id;
  jobs_.emplace(id, std::move(job));
  request_tick();
  return id;
}

JobId Scheduler::resubmit(JobId previous, JobRequest request) {
  auto& old = jobs_.at(job(previous).id);
  const auto id = submit(std::move(request));
  jobs_.at(id).resubmit_of = previous;
  old.resubmitted_as = id;
  return id;
}

bool Scheduler::cancel(JobId id) {
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw UnknownJob("unknown job " + std::to_string(id));
  if (it->second.state != JobState::pending) return false;
  it->second.end = kernel_.now();
  set_state(it->second, JobState::failed);
  return true;
}

void Scheduler::request_tick() {
  if (tick_scheduled_) return;
  tick_scheduled_ = true;
  kernel_.schedule(kernel_.now(), "scheduler tick", [this] { tick(); });
}

void Scheduler::set_state(SchedJob& job, JobState next) {
  const auto prev = job.state;
  job.state = next;
  for (const auto& l : listeners_) l(job, prev);
}

std::vector<const SchedJob*> Scheduler::pending_for(TargetKind kind, ReservationId r) const {
  std::vector<const SchedJob*> out;
  for (const auto& [id, j] : jobs_)
    if (j.state == JobState::pending && j.request.target.kind == kind &&
        (kind == TargetKind::batch || j.request.target.reservation == r))
      out.push_back(&j);
  std::stable_sort(out.begin(), out.end(), [](const SchedJob* a, const SchedJob* b) {
    return a->request.priority != b->request.priority ? a->request.priority > b->request.priority
                                                      : a->fifo_seq < b->fifo_seq;
  });
  return out;
}

bool Scheduler::node_reserved_during(int node, SimTime from, SimTime to) const {
  for (const auto& [id, r] : reservations_) {
    if (!(r.t0 < to && from < r.t1) && !(from == to && r.active_at(from))) continue;
    if (std::find(r.nodes.begin(), r.nodes.end(), node) != r.nodes.end()) return true;
  }
  return false;
}

void Scheduler::start_job(SchedJob& job, std::vector<int> nodes, std::vector<Decision>& out) {
  for (int n : nodes) node_owner_[static_cast<std::size_t>(n)] = job.id;
  job.nodes = std::move(nodes);
  job.start = kernel_.now();
  const auto id = job.id;
  timers_[id].completion = kernel_.schedule(kernel_.now() + sim_seconds(job.request.duration_s),
                                            "job " + std::to_string(id) + " completes",
                                            [this, id] { finish_job(id, JobState::done, DecisionKind::complete); });
  const Decision d{DecisionKind::start, id, kernel_.now()};
  out.push_back(d);
  log_.push_back(d);
  set_state(job, JobState::running);
}

void Scheduler::warn_job(SchedJob& job, double grace_s, std::vector<Decision>& out) {
  job.warned_at = kernel_.now();
  const auto id = job.id;
  auto& t = timers_[id];
  t.kill = kernel_.schedule(kernel_.now() + sim_seconds(grace_s), "job " + std::to_string(id) + " grace expires", [this, id] {
    jobs_.at(id).killed = true;
    finish_job(id, JobState::preempted, DecisionKind::kill);
  });
  if (job.request.exit_after_warning_s && *job.request.exit_after_warning_s < grace_s) {
    t.voluntary = kernel_.schedule(kernel_.now() + sim_seconds(*job.request.exit_after_warning_s),
                                   "job " + std::to_string(id) + " exits on signal",
                                   [this, id] { finish_job(id, JobState::preempted, DecisionKind::voluntary_exit); });
  }
  const Decision d{DecisionKind::warn, id, kernel_.now()};
  out.push_back(d);
  log_.push_back(d);
  set_state(job, JobState::preempt_warned);
}

void Scheduler::finish_job(JobId id, JobState final_state, DecisionKind why) {
  auto& job = jobs_.at(id);
  if (job.state != JobState::running && job.state != JobState::preempt_warned) return;
  job.end = kernel_.now();
  for (int n : job.nodes) {
    node_owner_[static_cast<std::size_t>(n)].reset();
    closed_.push_back({id, n, job.request.target.kind, *job.start, *job.end});
  }
  if (auto it = timers_.find(id); it != timers_.end()) {
    for (auto h : {it->second.completion, it->second.kill, it->second.voluntary})
      if (h) kernel_.cancel(*h);
    timers_.erase(it);
  }
  log_.push_back({why, id, kernel_.now()});
  set_state(job, final_state);
  if (final_state == JobState::preempted && config_.auto_requeue) {
    resubmit(id, job.request);
  }
  request_tick();
}

std::vector<Decision> Scheduler::tick() {
  tick_scheduled_ = false;
  std::vector<Decision> out;
  const SimTime now = kernel_.now();

  for (auto& [id, j] : jobs_) {
    if (j.state != JobState::pending || j.request.target.kind == TargetKind::batch) continue;
    if (now >= reservations_.at(j.request.target.reservation).t1) {
      j.end = now;
      const Decision d{DecisionKind::expire, id, now};
      out.push_back(d);
      log_.push_back(d);
      set_state(j, JobState::failed);
    }
  }

  std::vector<bool> withheld(node_owner_.size(), false);
  auto is_free = [&](int n) {
    return !node_owner_[static_cast<std::size_t>(n)] && !withheld[static_cast<std::size_t>(n)];
  };

  for (auto& [rid, r] : reservations_) {
    if (!r.active_at(now)) continue;
    auto free_nodes = [&] {
      std::vector<int> f;
      for (int n : r.nodes)
        if (is_free(n)) f.push_back(n);
      return f;
    };

    // Warned preemptibles whose nodes are not yet promised to an earlier urgent job.
    std::vector<JobId> warned;
    for (const auto& [id, j] : jobs_)
      if (j.state == JobState::preempt_warned && j.request.target == Target::preemptible(rid)) warned.push_back(id);

    bool urgent_waiting = false;
    for (const SchedJob* pending : pending_for(TargetKind::reservation, rid)) {
      auto& job = jobs_.at(pending->id);
      auto free = free_nodes();
      const auto need = static_cast<std::size_t>(job.request.nodes);
      if (free.size() >= need) {
        free.resize(need);
        start_job(job, std::move(free), out);
        continue;
      }
      urgent_waiting = true;
      std::size_t soon = free.size();
      std::size_t claim = 0;
      while (claim < warned.size() && soon < need) soon += jobs_.at(warned[claim++]).nodes.size();
      if (soon < need) {
        std::vector<SchedJob*> victims;
        for (auto& [id, j] : jobs_)
          if (j.state == JobState::running && j.request.target == Target::preemptible(rid)) victims.push_back(&j);
        std::sort(victims.begin(), victims.end(), [](const SchedJob* a, const SchedJob* b) {
          return *a->start != *b->start ? *a->start > *b->start : a->id > b->id;
        });
        for (auto* v : victims) {
          if (soon >= need) break;
          warn_job(*v, r.grace_s, out);
          warned.push_back(v->id);
          ++claim;
          soon += v->nodes.size();
        }
      }
      if (soon >= need) {
        for (int n : free) withheld[static_cast<std::size_t>(n)] = true;
        warned.erase(warned.begin(), warned.begin() + static_cast<std::ptrdiff_t>(claim));
      }
    }

    if (urgent_waiting) continue;
    for (const SchedJob* pending : pending_for(TargetKind::preemptible, rid)) {
      auto free = free_nodes();
      const auto need = static_cast<std::size_t>(pending->request.nodes);
      if (free.size() < need) continue;
      free.resize(need);
      start_job(jobs_.at(pending->id), std::move(free), out);
    }
  }

  for (const SchedJob* pending : pending_for(TargetKind::batch, -1)) {
    const SimTime until = now + sim_seconds(pending->request.duration_s);
    std::vector<int> eligible;
    for (int n = 0; n < config_.total_nodes && eligible.size() < static_cast<std::size_t>(pending->request.nodes); ++n)
      if (is_free(n) && !node_reserved_during(n, now, until)) eligible.push_back(n);
    if (eligible.size() < static_cast<std::size_t>(pending->request.nodes)) continue;
    start_job(jobs_.at(pending->id), std::move(eligible), out);
  }
  return out;
}

const SchedJob& Scheduler::job(JobId id) const {
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) throw UnknownJob("unknown job " + std::to_string(id));
  return it->second;
}

std::vector<Allocation> Scheduler::allocations() const {
  auto out = closed_;
  for (const auto& [id, j] : jobs_)
    if (j.state == JobState::running || j.state == JobState::preempt_warned)
      for (int n : j.nodes) out.push_back({id, n, j.request.target.kind, *j.start, kernel_.now()});
  return out;
}

int Scheduler::nodes_in_use() const {
  return static_cast<int>(std::count_if(node_owner_.begin(), node_owner_.end(), [](const auto& o) { return o.has_value(); }));
}

std::size_t Scheduler::pending_count() const {
  return static_cast<std::size_t>(std::count_if(jobs_.begin(), jobs_.end(), [](const auto& kv) {
    return kv.second.state == JobState::pending;
  }));
}

std::size_t Scheduler::running_count() const {
  return static_cast<std::size_t>(std::count_if(jobs_.begin(), jobs_.end(), [](const auto& kv) {
    return kv.second.state == JobState::running || kv.second.state == JobState::preempt_warned;
  }));
}

UtilizationSeries Scheduler::utilization_series(double bin_s) const {
  if (!(bin_s > 0.0)) throw ValidationError("bin_s must be positive");
  const auto allocs = allocations();
  SimTime last = kernel_.now();
  for (const auto& a : allocs) last = std::max(last, a.end);
  const auto bins = static_cast<std::size_t>(std::ceil(to_seconds(last) / bin_s));
  UtilizationSeries s{bin_s, std::vector<double>(bins), std::vector<double>(bins), std::vector<double>(bins)};
  for (const auto& a : allocs) {
    auto& series = a.kind == TargetKind::reservation ? s.reservation
                   : a.kind == TargetKind::preemptible ? s.preemptible
                                                       : s.batch;
    const auto first = static_cast<std::size_t>(to_seconds(a.start) / bin_s);
    for (std::size_t b = first; b < bins; ++b) {
      const double lo = std::max(to_seconds(a.start), static_cast<double>(b) * bin_s);
      const double hi = std::min(to_seconds(a.end), static_cast<double>(b + 1) * bin_s);
      if (lo >= to_seconds(a.end)) break;
      if (hi > lo) series[b] += (hi - lo) / bin_s;
    }
  }
  return s;
}

}  // namespace beamtime
