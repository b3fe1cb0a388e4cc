#include "beamtime/worker_pool.hpp"

#include <algorithm>
#include <queue>
#include <sstream>

#include "beamtime/errors.hpp"

namespace beamtime {

void validate(const StageProfile& p) {
  if (!(p.success_rate >= 0.0 && p.success_rate <= 1.0))
    throw ProfileInvalid(std::string(to_string(p.stage)) + ": success_rate must lie in [0,1]");
  try {
    beamtime::validate(p.duration);
  } catch (const InvalidDistribution& e) {
    throw ProfileInvalid(std::string(to_string(p.stage)) + ": " + e.what());
  }
  if (support_min(p.duration) < 0.0) throw ProfileInvalid(std::string(to_string(p.stage)) + ": negative durations");
  if (!(p.init_io_s >= 0.0) || !(p.result_write_s >= 0.0))
    throw ProfileInvalid(std::string(to_string(p.stage)) + ": I/O times must be >= 0");
}

StageProfile default_profile(Stage s) {
  switch (s) {
    case Stage::spotfinding:
      return {s, 0.49, DistSpec::lognormal_median(0.35, 0.35)};
    case Stage::indexing:
      // Three lognormal modes, one per indexing algorithm that may be tried on an image.
      return {s, 0.07,
              DistSpec::mixture({{0.975, DistSpec::lognormal_median(0.8, 0.25)},
                                 {0.012, DistSpec::lognormal_median(2.5, 0.15)},
                                 {0.013, DistSpec::lognormal_median(5.0, 0.15)}})};
    case Stage::refinement:
      return {s, 0.85, DistSpec::lognormal_median(1.2, 0.3)};
    case Stage::integration:
      return {s, 0.97, DistSpec::lognormal_median(0.9, 0.3)};
  }
  throw ProfileInvalid("unknown stage");
}

std::array<StageProfile, 4> default_profiles() {
  return {default_profile(Stage::spotfinding), default_profile(Stage::indexing), default_profile(Stage::refinement),
          default_profile(Stage::integration)};
}

nlohmann::json to_json(const StageProfile& p) {
  return {{"stage", to_string(p.stage)},
          {"success_rate", p.success_rate},
          {"duration", p.duration},
          {"init_io_s", p.init_io_s},
          {"result_write_s", p.result_write_s}};
}

StageProfile profile_from_json(const nlohmann::json& j, StageProfile base) {
  if (!j.is_object()) throw ProfileInvalid("stage profile must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "stage") base.stage = parse_stage(v.get<std::string>());
      else if (key == "success_rate") base.success_rate = v.get<double>();
      else if (key == "duration") base.duration = v.get<DistSpec>();
      else if (key == "init_io_s") base.init_io_s = v.get<double>();
      else if (key == "result_write_s") base.result_write_s = v.get<double>();
      else throw ProfileInvalid("unknown profile field '" + key + "'");
    } catch (const ProfileInvalid&) {
      throw;
    } catch (const std::exception& e) {
      throw ProfileInvalid(key + ": " + e.what());
    }
  }
  validate(base);
  return base;
}

std::string_view to_string(IoMode m) { return m == IoMode::shared ? "shared" : "burstbuffer"; }

IoMode parse_io_mode(std::string_view s) {
  if (s == "shared") return IoMode::shared;
  if (s == "burstbuffer" || s == "burst_buffer") return IoMode::burst_buffer;
  throw ValidationError("unknown io_mode '" + std::string(s) + "'");
}

RngStream image_stage_stream(std::uint64_t seed, TrialId trial, const ImageRef& image, Stage stage) {
  return RngStream(stream_seed(seed, "trial:" + std::to_string(trial)),
                   image_stream_key(image.run_id, image.index) + ":" + std::string(to_string(stage)));
}

StageDraw stage_outcome(const ImageRef&, const StageProfile& profile, RngStream& rng) {
  StageDraw d;
  const double u = rng.uniform01();
  d.outcome = u < profile.success_rate ? Outcome::success : Outcome::rejected;
  d.duration_s = std::max(0.0, sample(rng, profile.duration));
  if (profile.stage == Stage::spotfinding) {
    const auto bits = rng.next_u64();
    d.n_spots = d.outcome == Outcome::success ? static_cast<std::int32_t>(20 + bits % 281)
                                              : static_cast<std::int32_t>(bits % 20);
  }
  return d;
}

std::vector<ImageRef> JobResult::survivors() const {
  std::vector<ImageRef> out;
  for (const auto& t : traces)
    if (!t.entries.empty() && t.entries.back().outcome == Outcome::success) out.push_back(t.image);
  return out;
}

std::size_t JobResult::survivor_count() const {
  return static_cast<std::size_t>(std::count_if(traces.begin(), traces.end(), [](const ImageTrace& t) {
    return !t.entries.empty() && t.entries.back().outcome == Outcome::success;
  }));
}

namespace {

enum class EvType { flush_end = 0, flush_begin = 1, compute_done = 2, write_done = 3, ready = 4 };

struct Ev {
  std::int64_t at;
  EvType type;
  std::uint64_t seq;
  int who;  // rank, or group for flush events
  bool operator>(const Ev& o) const {
    if (at != o.at) return at > o.at;
    if (type != o.type) return type > o.type;
    return seq > o.seq;
  }
};

struct Group {
  std::vector<std::size_t> buffer;
  std::int64_t oldest = 0;
  std::int64_t busy_until = 0;
  int active = 0;
  std::optional<Connection> conn;
  std::vector<std::size_t> in_flight;
};

std::int64_t ns(double seconds) { return sim_seconds(seconds).count(); }

}  // namespace

JobResult run_stage_job(const std::vector<ImageRef>& images, int ranks, const StageProfile& profile,
                        const PoolOptions& options) {
  validate(profile);
  if (ranks < 2) throw ValidationError("a stage job needs a producer and at least one consumer (ranks >= 2)");
  if (options.group_size < 1) throw ValidationError("rank group size must be >= 1");
  if (!(options.shared_open_s >= 0.0)) throw ValidationError("shared_open_s must be >= 0");

  JobResult r;
  r.job_id = options.job_id;
  r.stage = profile.stage;
  r.trial = options.trial;
  r.ranks = ranks;
  r.io_mode = options.io_mode;
  r.start = options.start;
  r.groups = (ranks + options.group_size - 1) / options.group_size;
  if (images.empty()) return r;

  r.traces.reserve(images.size());
  for (const auto& img : images) r.traces.push_back({img, {}, 0});
  r.rank_timelines.resize(static_cast<std::size_t>(ranks));
  for (int k = 0; k < ranks; ++k) r.rank_timelines[static_cast<std::size_t>(k)].rank = k;

  const std::int64_t t0 = to_ns(options.start);
  const bool shared = options.io_mode == IoMode::shared;
  const std::int64_t open_ns = ns(options.shared_open_s);
  std::int64_t server_free = t0;

  std::vector<Group> groups(static_cast<std::size_t>(r.groups));
  for (int k = 1; k < ranks; ++k) ++groups[static_cast<std::size_t>(k / options.group_size)].active;

  std::priority_queue<Ev, std::vector<Ev>, std::greater<>> q;
  std::uint64_t seq = 0;
  auto push = [&](std::int64_t at, EvType type, int who) { q.push({at, type, seq++, who}); };
  auto segment = [&](int rank, std::int64_t a, std::int64_t b, SegmentKind kind, std::int64_t trace) {
    if (b <= a) return;
    r.rank_timelines[static_cast<std::size_t>(rank)].segments.push_back({from_ns(a), from_ns(b), kind, profile.stage, trace});
  };

  for (int k = 1; k < ranks; ++k) {
    std::int64_t s = t0;
    std::int64_t init = ns(profile.init_io_s);
    if (shared) {
      s = std::max(t0, server_free);
      server_free = s + open_ns;
      init += open_ns;
    }
    segment(k, s, s + init, SegmentKind::init_io, -1);
    push(s + init, EvType::ready, k);
  }

  std::vector<std::int64_t> current(static_cast<std::size_t>(ranks), -1);
  std::size_t next_image = 0;
  std::int64_t last = t0;
  int open_conns = 0;

  auto flush = [&](Group& g, int gi, std::int64_t now) -> std::int64_t {
    const std::int64_t begin = std::max(now, g.busy_until);
    const std::int64_t end =
        begin + ns(options.db.connect_s + options.db.per_record_s * static_cast<double>(g.buffer.size()));
    g.busy_until = end;
    for (auto idx : g.buffer) r.records[idx].committed_at = from_ns(end);
    r.flushes.push_back({gi, from_ns(begin), from_ns(end), std::move(g.buffer)});
    g.buffer.clear();
    push(begin, EvType::flush_begin, static_cast<int>(r.flushes.size() - 1));
    push(end, EvType::flush_end, static_cast<int>(r.flushes.size() - 1));
    r.db_time_s += to_seconds(SimDuration{end - now});
    return end;
  };

  while (!q.empty()) {
    const Ev ev = q.top();
    q.pop();
    last = std::max(last, ev.at);
    const auto rank = static_cast<std::size_t>(ev.who);
    switch (ev.type) {
      case EvType::ready: {
        if (next_image < images.size()) {
          const auto i = next_image++;
          auto rng = image_stage_stream(options.seed, options.trial, images[i], profile.stage);
          const auto draw = stage_outcome(images[i], profile, rng);
          const std::int64_t end = ev.at + ns(draw.duration_s);
          auto& tr = r.traces[i];
          tr.rank = ev.who;
          tr.entries.push_back({profile.stage, from_ns(ev.at), from_ns(end), from_ns(end), draw.outcome, ev.who, draw.n_spots});
          segment(ev.who, ev.at, end, SegmentKind::compute, static_cast<std::int64_t>(i));
          current[rank] = static_cast<std::int64_t>(i);
          push(end, EvType::compute_done, ev.who);
        } else {
          const auto gi = ev.who / options.group_size;
          auto& g = groups[static_cast<std::size_t>(gi)];
          if (--g.active == 0 && !g.buffer.empty()) flush(g, gi, ev.at);
        }
        break;
      }
      case EvType::compute_done: {
        std::int64_t s = ev.at;
        std::int64_t len = ns(profile.result_write_s);
        if (shared) {
          s = std::max(ev.at, server_free);
          server_free = s + open_ns;
          len += open_ns;
        }
        segment(ev.who, s, s + len, SegmentKind::write, current[rank]);
        push(s + len, EvType::write_done, ev.who);
        break;
      }
      case EvType::write_done: {
        const auto i = static_cast<std::size_t>(current[rank]);
        auto& e = r.traces[i].entries.back();
        e.done = from_ns(ev.at);
        r.records.push_back({-1, images[i].run_id, images[i].index, options.trial, profile.stage, e.outcome, e.n_spots,
                             options.job_id, from_ns(ev.at)});
        const auto gi = ev.who / options.group_size;
        auto& g = groups[static_cast<std::size_t>(gi)];
        if (g.buffer.empty()) g.oldest = ev.at;
        g.buffer.push_back(r.records.size() - 1);
        std::int64_t resume = ev.at;
        if (g.buffer.size() >= options.flush.max_records ||
            to_seconds(SimDuration{ev.at - g.oldest}) >= options.flush.max_age_s)
          resume = flush(g, gi, ev.at);
        push(resume, EvType::ready, ev.who);
        break;
      }
      case EvType::flush_begin: {
        auto& plan = r.flushes[rank];
        r.connection_high_water = std::max(r.connection_high_water, ++open_conns);
        if (options.store) groups[static_cast<std::size_t>(plan.group)].conn = options.store->connect(plan.begin);
        break;
      }
      case EvType::flush_end: {
        auto& plan = r.flushes[rank];
        --open_conns;
        if (options.store) {
          auto& g = groups[static_cast<std::size_t>(plan.group)];
          std::vector<ProgressRecord> batch;
          batch.reserve(plan.records.size());
          for (auto idx : plan.records) batch.push_back(r.records[idx]);
          const auto conn = *g.conn;
          g.conn.reset();
          try {
            options.store->commit(conn, std::move(batch), plan.end);
          } catch (...) {
            options.store->close(conn);
            throw;
          }
          options.store->close(conn);
        }
        break;
      }
    }
  }
  r.makespan_s = to_seconds(SimDuration{last - t0});
  return r;
}

std::vector<JobResult> chain_stages(const std::vector<ImageRef>& images, const std::array<StageProfile, 4>& profiles,
                                    const std::array<int, 4>& ranks_per_stage, const PoolOptions& options) {
  for (std::size_t s = 0; s < 4; ++s)
    if (profiles[s].stage != kStages[s]) throw ProfileInvalid("profiles must be ordered spotfinding..integration");
  std::vector<JobResult> out;
  std::vector<ImageRef> input = images;
  PoolOptions o = options;
  for (std::size_t s = 0; s < 4; ++s) {
    o.job_id = options.job_id + static_cast<JobId>(s);
    out.push_back(run_stage_job(input, ranks_per_stage[s], profiles[s], o));
    o.start = out.back().end();
    input = out.back().survivors();
  }
  return out;
}

void shift(JobResult& r, SimDuration by) {
  r.start += by;
  for (auto& t : r.traces)
    for (auto& e : t.entries) {
      e.start += by;
      e.end += by;
      e.done += by;
    }
  for (auto& tl : r.rank_timelines)
    for (auto& s : tl.segments) {
      s.start += by;
      s.end += by;
    }
  for (auto& f : r.flushes) {
    f.begin += by;
    f.end += by;
  }
  for (auto& rec : r.records) rec.committed_at += by;
}

std::string trace_csv(const JobResult& r, bool header) {
  std::ostringstream out;
  if (header) out << "job_id,image_id,rank,stage,start_ns,end_ns,outcome\n";
  for (const auto& t : r.traces)
    for (const auto& e : t.entries)
      out << r.job_id << ',' << t.image.id() << ',' << e.rank << ',' << to_string(e.stage) << ',' << to_ns(e.start)
          << ',' << to_ns(e.end) << ',' << to_string(e.outcome) << '\n';
  return out.str();
}

double rank_stall_spread_s(const JobResult& r) {
  std::vector<double> stalls;
  for (const auto& tl : r.rank_timelines) {
    if (tl.rank == 0 || tl.segments.empty()) continue;
    double busy = 0.0;
    for (const auto& s : tl.segments) busy += to_seconds(s.end - s.start);
    stalls.push_back(to_seconds(tl.segments.back().end - r.start) - busy);
  }
  if (stalls.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(stalls.begin(), stalls.end());
  return *hi - *lo;
}

}  // namespace beamtime
