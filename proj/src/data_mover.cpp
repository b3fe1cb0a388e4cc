#include "beamtime/data_mover.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "beamtime/errors.hpp"

namespace beamtime {

void LinkProfile::validate() const {
  if (!(nominal_rate > 0.0)) throw ValidationError("link nominal_rate must be positive");
  if (!(per_file_latency_s >= 0.0)) throw ValidationError("link per_file_latency_s must be >= 0");
  if (parallel_streams < 1) throw ValidationError("link parallel_streams must be >= 1");
  for (std::size_t i = 0; i < degradation.size(); ++i) {
    if (!(degradation[i].factor >= 1.0)) throw ValidationError("degradation factor must be >= 1");
    if (i > 0 && degradation[i].from <= degradation[i - 1].from)
      throw ValidationError("degradation steps must be strictly increasing in time");
  }
}

double LinkProfile::factor_at(SimTime t) const {
  double f = 1.0;
  for (const auto& step : degradation) {
    if (step.from > t) break;
    f = step.factor;
  }
  return f;
}

namespace {

std::optional<SimTime> next_change_after(const LinkProfile& link, SimTime t) {
  for (const auto& step : link.degradation)
    if (step.from > t) return step.from;
  return std::nullopt;
}

}  // namespace

SimTime LinkProfile::finish_time(SimTime data_start, std::int64_t bytes) const {
  if (bytes <= 0) return data_start;
  double remaining = static_cast<double>(bytes);
  SimTime t = data_start;
  for (;;) {
    const double rate = stream_rate(t);
    const auto next = next_change_after(*this, t);
    if (!next || remaining <= rate * to_seconds(*next - t)) return t + sim_seconds(remaining / rate);
    remaining -= rate * to_seconds(*next - t);
    t = *next;
  }
}

double LinkProfile::stream_bytes_between(SimTime a, SimTime b) const {
  double total = 0.0;
  SimTime t = a;
  while (t < b) {
    const auto next = next_change_after(*this, t);
    const SimTime seg_end = next ? std::min(*next, b) : b;
    total += stream_rate(t) * to_seconds(seg_end - t);
    t = seg_end;
  }
  return total;
}

nlohmann::json to_json(const LinkProfile& link) {
  auto steps = nlohmann::json::array();
  for (const auto& s : link.degradation) steps.push_back({{"from_s", to_seconds(s.from)}, {"factor", s.factor}});
  return {{"nominal_rate", link.nominal_rate},
          {"per_file_latency_s", link.per_file_latency_s},
          {"parallel_streams", link.parallel_streams},
          {"degradation", steps}};
}

LinkProfile link_from_json(const nlohmann::json& j) {
  LinkProfile link;
  for (const auto& [key, value] : j.items()) {
    if (key == "nominal_rate") {
      link.nominal_rate = value.get<double>();
    } else if (key == "per_file_latency_s") {
      link.per_file_latency_s = value.get<double>();
    } else if (key == "parallel_streams") {
      link.parallel_streams = value.get<int>();
    } else if (key == "degradation") {
      for (const auto& s : value) link.degradation.push_back({at_seconds(s.at("from_s").get<double>()), s.at("factor").get<double>()});
    } else {
      throw ConfigError("/" + key, "unknown link key");
    }
  }
  link.validate();
  return link;
}

DataMover::DataMover(Kernel& kernel, EventBus& bus, StatusBoard* status, MoverConfig config, std::uint64_t seed)
    : kernel_(kernel), bus_(bus), status_(status), config_(std::move(config)), seed_(seed) {
  config_.link.validate();
  if (config_.max_parallel < 1) throw ValidationError("max_parallel must be >= 1");
  if (config_.max_attempts < 1) throw ValidationError("max_attempts must be >= 1");
  if (config_.queue_file && std::filesystem::exists(*config_.queue_file)) load_journal();
}

void DataMover::journal(EventKind kind, const nlohmann::json& payload, SimTime at) {
  if (!config_.queue_file || replaying_) return;
  BusEvent rec{"mover", journal_offset_++, at, kind, payload};
  std::ofstream out(*config_.queue_file, std::ios::app | std::ios::binary);
  out << format_record(rec) << '\n';
}

void DataMover::load_journal() {
  replaying_ = true;
  for (const auto& ev : read_log(*config_.queue_file, "mover")) {
    journal_offset_ = ev.offset + 1;
    if (ev.kind == EventKind::transfer_completed) {
      const auto path = ev.payload.value("path", "");
      if (auto it = progress_.find(path); it != progress_.end()) it->second.state = FileState::done;
      const auto run = ev.payload.at("run").get<RunId>();
      const auto& entry = entries_.at(run);
      const bool all_done = std::all_of(entry.files.begin(), entry.files.end(),
                                        [&](const FileAsset& f) { return progress_.at(f.path).state == FileState::done; });
      if (all_done && entry.concluded) {
        completed_runs_.insert(run);
        completed_at_[run] = ev.time;
      }
    } else {
      on_event(ev);
    }
  }
  replaying_ = false;
}

bool DataMover::add_file(const FileAsset& f) {
  if (progress_.contains(f.path)) return false;
  auto& entry = entries_[f.run_id];
  if (entry.files.empty() && !entry.concluded) {
    entry.run_id = f.run_id;
    entry.enqueued_at = kernel_.now();
  }
  entry.files.push_back(f);
  progress_.emplace(f.path, FileProgress{});
  return true;
}

std::size_t DataMover::on_event(const BusEvent& event) {
  std::size_t added = 0;
  if (event.kind == EventKind::file_created) {
    added += add_file(file_from_json(event.payload)) ? 1 : 0;
    journal(event.kind, event.payload, event.time);
  } else if (event.kind == EventKind::run_concluded) {
    const auto run = event.payload.at("run").get<RunId>();
    for (const auto& f : event.payload.value("files", nlohmann::json::array())) added += add_file(file_from_json(f)) ? 1 : 0;
    auto& entry = entries_[run];
    entry.run_id = run;
    if (!entry.concluded) {
      if (entry.files.empty()) entry.enqueued_at = event.time;
      entry.concluded = true;
      entry.concluded_at = event.time;
      entry.conclude_seq = next_conclude_seq_++;
      journal(event.kind, event.payload, event.time);
      // An empty run has nothing to move.
      if (entry.files.empty()) {
        completed_runs_.insert(run);
        completed_at_[run] = event.time;
      }
    }
  }
  return added;
}

bool DataMover::destination_active() const {
  if (!status_) return true;
  for (const auto& r : config_.destination_resources)
    if (status_->has(r) && !status_->is_active(r)) return false;
  return true;
}

std::vector<Assignment> DataMover::dispatch(int max_parallel) {
  if (max_parallel < 1) throw ValidationError("max_parallel must be >= 1");
  if (!destination_active()) throw DestinationUnavailable("destination is not active; nothing dispatched");

  std::vector<const TransferQueueEntry*> order;
  for (const auto& [id, e] : entries_)
    if (e.concluded && !completed_runs_.contains(id) && !failed_runs_.contains(id)) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->concluded_at != b->concluded_at ? a->concluded_at < b->concluded_at : a->conclude_seq < b->conclude_seq;
  });

  std::vector<Assignment> out;
  auto capacity = static_cast<std::ptrdiff_t>(max_parallel) - static_cast<std::ptrdiff_t>(active_.size());
  for (const auto* e : order) {
    for (const auto& f : e->files) {
      if (capacity <= 0) return out;
      auto& p = progress_.at(f.path);
      if (p.state != FileState::pending || p.eligible_at > kernel_.now()) continue;
      p.state = FileState::active;
      ++p.attempts;
      Assignment a{e->run_id, f, p.attempts};
      active_.emplace(f.path, Active{a, {}, {}});
      out.push_back(std::move(a));
      --capacity;
    }
  }
  return out;
}

TransferRecord DataMover::execute_transfer(const Assignment& assignment, const LinkProfile& link, SimTime start) {
  TransferRecord rec;
  rec.file = assignment.file;
  rec.start = start;
  rec.attempt = assignment.attempt;
  rec.bytes = assignment.file.size_bytes;
  const SimTime data_start = start + sim_seconds(link.per_file_latency_s);
  rec.end = link.finish_time(data_start, rec.bytes);
  const double window = to_seconds(rec.end - data_start);
  rec.effective_rate = window > 0.0 ? static_cast<double>(rec.bytes) / window : link.stream_rate(data_start);
  return rec;
}

void DataMover::start() {
  if (started_) return;
  started_ = true;
  cursor_ = bus_.subscribe(std::string(topics::runs), 0);
  bus_.add_observer([this](const BusEvent& ev) {
    if (ev.topic == topics::runs) request_pump();
  });
  if (status_) {
    status_->add_observer([this](const std::string& name, Health) {
      if (std::find(config_.destination_resources.begin(), config_.destination_resources.end(), name) ==
          config_.destination_resources.end())
        return;
      if (!destination_active()) abort_active();
      request_pump();
    });
  }
  request_pump();
}

void DataMover::request_pump() {
  if (!started_ || pump_scheduled_) return;
  pump_scheduled_ = true;
  kernel_.schedule(kernel_.now(), "mover pump", [this] { pump(); });
}

void DataMover::pump() {
  pump_scheduled_ = false;
  if (cursor_)
    for (const auto& ev : bus_.poll(*cursor_)) on_event(ev);

  std::vector<Assignment> batch;
  try {
    batch = dispatch(config_.max_parallel);
  } catch (const DestinationUnavailable&) {
    return;
  }
  for (auto& a : batch) {
    auto planned = execute_transfer(a, config_.link, kernel_.now());
    bool fault = false;
    if (auto it = forced_faults_.find(a.file.path); it != forced_faults_.end() && it->second > 0) {
      --it->second;
      fault = true;
    } else if (config_.fault_probability > 0.0) {
      RngStream rng(seed_, "transfer:" + a.file.path + ":" + std::to_string(a.attempt));
      fault = rng.uniform01() < config_.fault_probability;
    }
    if (fault) planned.outcome = TransferOutcome::faulted;
    bus_.publish(std::string(topics::transfers), EventKind::transfer_started,
                 {{"run", a.run_id}, {"path", a.file.path}, {"attempt", a.attempt}}, kernel_.now());
    const auto path = a.file.path;
    auto& act = active_.at(path);
    act.planned = planned;
    act.completion = kernel_.schedule(planned.end, "transfer done " + path, [this, path] { complete(path); });
  }

  // Wake up again when the earliest backed-off file becomes eligible.
  std::optional<SimTime> wake;
  for (const auto& [path, p] : progress_)
    if (p.state == FileState::pending && p.eligible_at > kernel_.now())
      wake = wake ? std::min(*wake, p.eligible_at) : p.eligible_at;
  if (wake) kernel_.schedule(*wake, "mover backoff wake", [this] { request_pump(); });
}

void DataMover::complete(const std::string& path) {
  auto node = active_.extract(path);
  const Active& act = node.mapped();
  TransferRecord rec = act.planned;
  auto& p = progress_.at(path);
  const auto run = act.assignment.run_id;
  records_.push_back(rec);

  if (rec.outcome == TransferOutcome::faulted) {
    if (p.attempts >= config_.max_attempts) {
      p.state = FileState::failed;
      failed_runs_.insert(run);
      bus_.publish(std::string(topics::transfers), EventKind::transfer_completed,
                   {{"run", run}, {"path", path}, {"status", "failed"}, {"attempt", p.attempts}}, kernel_.now());
    } else {
      p.state = FileState::pending;
      p.eligible_at = kernel_.now() + sim_seconds(config_.retry_base_s * std::pow(config_.retry_factor, p.attempts - 1));
      bus_.publish(std::string(topics::transfers), EventKind::transfer_completed,
                   {{"run", run}, {"path", path}, {"status", "faulted"}, {"attempt", p.attempts}}, kernel_.now());
    }
    request_pump();
    return;
  }

  p.state = FileState::done;
  const nlohmann::json payload{{"run", run},
                               {"path", path},
                               {"status", "ok"},
                               {"bytes", rec.bytes},
                               {"start_ns", to_ns(rec.start)},
                               {"end_ns", to_ns(rec.end)},
                               {"attempt", rec.attempt}};
  journal(EventKind::transfer_completed, payload, kernel_.now());
  bus_.publish(std::string(topics::transfers), EventKind::transfer_completed, payload, kernel_.now());

  const auto& entry = entries_.at(run);
  const bool all_done = std::all_of(entry.files.begin(), entry.files.end(),
                                    [&](const FileAsset& f) { return progress_.at(f.path).state == FileState::done; });
  if (all_done) {
    completed_runs_.insert(run);
    completed_at_[run] = kernel_.now();
    bus_.publish(std::string(topics::transfers), EventKind::transfer_completed,
                 {{"run", run},
                  {"scope", "run"},
                  {"status", "available_remote"},
                  {"bytes", bytes_delivered(run)},
                  {"files", entry.files.size()},
                  {"concluded_ns", to_ns(entry.concluded_at)}},
                 kernel_.now());
  }
  request_pump();
}

void DataMover::abort_active() {
  for (auto& [path, act] : active_) {
    kernel_.cancel(act.completion);
    TransferRecord rec = act.planned;
    const SimTime data_start = rec.start + sim_seconds(config_.link.per_file_latency_s);
    rec.end = kernel_.now();
    rec.bytes = rec.end > data_start
                    ? std::min<std::int64_t>(rec.file.size_bytes,
                                             std::llround(config_.link.stream_bytes_between(data_start, rec.end)))
                    : 0;
    rec.outcome = TransferOutcome::aborted;
    records_.push_back(rec);
    auto& p = progress_.at(path);
    p.state = FileState::pending;
    --p.attempts;
  }
  active_.clear();
}

std::vector<double> DataMover::throughput_series(double bin_s) const {
  if (!(bin_s > 0.0)) throw ValidationError("bin_s must be positive");
  SimTime last{};
  for (const auto& r : records_) last = std::max(last, r.end);
  const auto bins = static_cast<std::size_t>(std::ceil(to_seconds(last) / bin_s));
  std::vector<double> series(bins, 0.0);
  const auto latency = sim_seconds(config_.link.per_file_latency_s);
  for (const auto& r : records_) {
    const SimTime from = r.start + latency;
    if (r.end <= from || r.bytes == 0) continue;
    const auto first = static_cast<std::size_t>(to_seconds(from) / bin_s);
    for (std::size_t b = first; b < bins; ++b) {
      const SimTime lo = std::max(from, at_seconds(static_cast<double>(b) * bin_s));
      const SimTime hi = std::min(r.end, at_seconds(static_cast<double>(b + 1) * bin_s));
      if (lo >= r.end) break;
      if (hi > lo) series[b] += config_.link.stream_bytes_between(lo, hi) / bin_s;
    }
  }
  return series;
}

std::vector<TransferQueueEntry> DataMover::queue() const {
  std::vector<TransferQueueEntry> out;
  for (const auto& [id, e] : entries_)
    if (!completed_runs_.contains(id)) out.push_back(e);
  return out;
}

std::size_t DataMover::backlog_depth() const {
  std::size_t n = 0;
  for (const auto& [id, e] : entries_)
    if (e.concluded && !completed_runs_.contains(id) && !failed_runs_.contains(id)) ++n;
  return n;
}

std::int64_t DataMover::bytes_delivered(RunId run) const {
  std::int64_t total = 0;
  for (const auto& r : records_)
    if (r.file.run_id == run && r.outcome == TransferOutcome::completed) total += r.bytes;
  return total;
}

std::optional<SimTime> DataMover::run_completed_at(RunId run) const {
  const auto it = completed_at_.find(run);
  return it == completed_at_.end() ? std::nullopt : std::optional<SimTime>(it->second);
}

std::optional<SimTime> DataMover::run_concluded_at(RunId run) const {
  const auto it = entries_.find(run);
  if (it == entries_.end() || !it->second.concluded) return std::nullopt;
  return it->second.concluded_at;
}

}  // namespace beamtime
