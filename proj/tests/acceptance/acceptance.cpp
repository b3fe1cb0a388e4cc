// Acceptance checks. One PASS/FAIL line per criterion; exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "beamtime/api.hpp"
#include "beamtime/data_mover.hpp"
#include "beamtime/errors.hpp"
#include "beamtime/metrics.hpp"
#include "beamtime/simulation.hpp"
#include "beamtime/worker_pool.hpp"

using namespace beamtime;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::path(BEAMTIME_TEST_TMP) / "acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double wall_s(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::vector<ImageRef> make_images(std::int64_t n, RunId run = 1) {
  std::vector<ImageRef> v;
  v.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) v.push_back({run, i, 0, i * 8'000'000, at_seconds(i / 120.0), 8'000'000});
  return v;
}

// The 100k-image pipeline at default rates, shared by the survivor and duration checks.
const std::vector<JobResult>& p175_chain() {
  static const std::vector<JobResult> chain = [] {
    PoolOptions o;
    o.seed = 175;
    return chain_stages(make_images(100000), default_profiles(), {64, 64, 8, 8}, o);
  }();
  return chain;
}

Verdict survivors() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& chain = p175_chain();
  const double secs = wall_s(t0);
  const double n = 100000;
  const double rates[4] = {0.49, 0.07, 0.85, 0.97};
  double q = 1.0;
  bool ok = secs < 60.0;
  std::string d;
  for (std::size_t s = 0; s < 4; ++s) {
    q *= rates[s];
    const double mean = n * q;
    const double sd = std::sqrt(n * q * (1 - q));
    const auto got = static_cast<double>(chain[s].survivor_count());
    const double z = (got - mean) / sd;
    ok = ok && std::abs(z) <= 3.0;
    d += fmt("%s %.0f (expect %.1f, z=%+.2f) ", std::string(to_string(kStages[s])).c_str(), got, mean, z);
  }
  return {ok, d + fmt("wall %.1fs", secs)};
}

// Runs of at most 300 GB at 2.6 GB/s; returns per-run transfer seconds from conclusion.
std::vector<double> transfer_durations(double degradation) {
  Kernel kernel;
  EventBus bus;
  Facility facility(kernel, bus, {}, 11);
  MoverConfig mc;
  if (degradation != 1.0) mc.link.degradation.push_back({kEpoch, degradation});
  DataMover mover(kernel, bus, nullptr, mc, 11);
  mover.start();
  const std::vector<std::pair<double, double>> runs{{120, 300}, {120, 250}, {40, 900}, {120, 60}, {80, 310}, {120, 300}};
  std::vector<RunId> ids;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto [hz, dur] = runs[i];
    kernel.schedule(at_seconds(i * 2400.0), "run", [&, hz, dur] { ids.push_back(facility.start_run("p175", hz, sim_seconds(dur))); });
  }
  kernel.run_until(at_seconds(runs.size() * 2400.0 + 3600));
  std::vector<double> out;
  for (auto id : ids) {
    if (facility.run(id).total_bytes() > 300'000'000'000LL) throw std::logic_error("run exceeds 300 GB");
    const auto done = mover.run_completed_at(id);
    out.push_back(done ? to_seconds(*done - *mover.run_concluded_at(id)) : -1.0);
  }
  return out;
}

Verdict transfer_timing() {
  const auto base = transfer_durations(1.0);
  bool ok = true;
  double worst = 0;
  for (double d : base) {
    ok = ok && d >= 0 && d <= 180.0;
    worst = std::max(worst, d);
  }
  std::string d = fmt("nominal max %.1fs over %zu runs; ", worst, base.size());
  for (double f : {5.0, 5.5, 6.0}) {
    const auto slow = transfer_durations(f);
    double max_err = 0;
    for (std::size_t i = 0; i < base.size(); ++i) max_err = std::max(max_err, std::abs(slow[i] / base[i] / f - 1.0));
    ok = ok && max_err <= 0.01;
    d += fmt("x%.1f max rel err %.2e; ", f, max_err);
  }
  return {ok, d};
}

Verdict turnaround() {
  Simulation sim(load_scenario(*bundled_scenario("p175-day")));
  sim.run();
  const auto rep = sim.orchestrator().turnaround_report();
  const bool ok = rep.min_s >= 180.0 && rep.min_s <= 240.0 && rep.band_10_20 >= 0.50;
  return {ok, fmt("min %.1f min, 10-20 min band %.3f (need >= 0.50), %zu images", rep.min_s / 60, rep.band_10_20,
                  rep.samples.size())};
}

Verdict durations() {
  // Pipeline time per image over the stages it actually went through.
  std::map<std::int64_t, double> total;
  for (const auto& job : p175_chain())
    for (const auto& t : job.traces)
      for (const auto& e : t.entries) total[t.image.index] += to_seconds(e.end - e.start);
  std::size_t within = 0;
  for (const auto& [_, s] : total) within += s <= 7.0;
  const double p7 = static_cast<double>(within) / static_cast<double>(total.size());

  // All four stages drawn for every image, as if nothing were rejected.
  const auto profiles = default_profiles();
  const auto imgs = make_images(100000, 2);
  std::size_t within_all = 0, over2 = 0;
  for (const auto& img : imgs) {
    double sum = 0;
    for (const auto& p : profiles) {
      auto rng = image_stage_stream(175, 0, img, p.stage);
      const auto dr = stage_outcome(img, p, rng);
      sum += dr.duration_s;
      if (p.stage == Stage::indexing) over2 += dr.duration_s > 2.0;
    }
    within_all += sum <= 7.0;
  }
  const double tail = over2 / 1e5;
  const double p7_all = within_all / 1e5;
  const bool ok = total.size() >= 100000 && p7 >= 0.95 && tail >= 0.02 && tail <= 0.03;
  return {ok, fmt("P(pipeline<=7s)=%.4f over %zu images (all four stages: %.4f); P(indexing>2s)=%.4f over 1e5", p7,
                  total.size(), p7_all, tail)};
}

Verdict weak_scaling() {
  const std::int64_t n = 100 * 512;
  const auto imgs = make_images(n);
  const auto p = default_profile(Stage::spotfinding);
  PoolOptions o;
  o.seed = 5;
  std::vector<JobResult> jobs;
  for (int r : {8, 64, 512}) jobs.push_back(run_stage_job(imgs, r, p, o));
  const auto rows = scaling_summary(jobs);
  bool ok = rows.size() == 3 && rows[0].mean_s == rows[1].mean_s && rows[1].mean_s == rows[2].mean_s;
  std::string d = fmt("mean %.6fs at R=8/64/512 (%s); ", rows[0].mean_s, ok ? "identical" : "DIFFER");
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const double per = jobs[i].makespan_s * (jobs[i].ranks - 1) / static_cast<double>(n);
    const double rel = per / rows[i].mean_s - 1.0;
    ok = ok && std::abs(rel) <= 0.10;
    d += fmt("R=%d makespan*consumers/N=%.4fs (%+.1f%%) ", jobs[i].ranks, per, rel * 100);
  }
  return {ok, d};
}

// Independent first-come-first-served oracle for single-node jobs on `servers` nodes.
std::vector<SimTime> fifo_starts(const std::vector<std::pair<SimTime, SimDuration>>& jobs, int servers) {
  std::vector<SimTime> free(static_cast<std::size_t>(servers), SimTime{});
  std::vector<SimTime> starts;
  SimTime last_start{};
  for (const auto& [submit, dur] : jobs) {
    auto it = std::min_element(free.begin(), free.end());
    const SimTime s = std::max({submit, *it, last_start});
    *it = s + dur;
    last_start = s;
    starts.push_back(s);
  }
  return starts;
}

Verdict preemption() {
  // Property part over random schedules.
  int killed = 0, checked = 0, violations = 0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    RngStream rng(seed, "acceptance-preempt");
    Kernel k;
    Scheduler s(k, {24});
    std::vector<ReservationId> res;
    for (int i = 0; i < 3; ++i) {
      const double t0 = rng.uniform01() * 1000;
      try {
        res.push_back(s.create_reservation(1 + static_cast<int>(rng.next_u64() % 8), at_seconds(t0),
                                           at_seconds(t0 + 200 + rng.uniform01() * 2000), 1 + rng.uniform01() * 120));
      } catch (const CapacityExceeded&) {
      }
    }
    if (res.empty()) continue;
    for (int j = 0; j < 60; ++j) {
      JobRequest req;
      req.nodes = 1 + static_cast<int>(rng.next_u64() % 6);
      req.duration_s = 5 + rng.uniform01() * 600;
      const auto kind = rng.next_u64() % 3;
      const auto r = res[rng.next_u64() % res.size()];
      req.target = kind == 0 ? Target::urgent(r) : kind == 1 ? Target::preemptible(r) : Target::batch();
      if (rng.uniform01() < 0.5) req.exit_after_warning_s = rng.uniform01() * 200;
      k.schedule(at_seconds(rng.uniform01() * 3000), "submit", [&s, req] {
        try {
          s.submit(req);
        } catch (const NodesExceedPool&) {
        }
      });
    }
    k.run_until(at_seconds(40000));
    for (const auto& [id, j] : s.jobs()) {
      if (!j.killed) continue;
      ++killed;
      const double g = s.reservations().at(j.request.target.reservation).grace_s;
      if (!j.warned_at || !j.end || to_seconds(*j.end - *j.warned_at) < g - 1e-9) ++violations;
    }
    for (const auto& a : s.allocations()) {
      if (a.kind != TargetKind::batch) continue;
      ++checked;
      for (const auto& [rid, r] : s.reservations())
        if (std::find(r.nodes.begin(), r.nodes.end(), a.node) != r.nodes.end() && a.start < r.t1 && a.end > r.t0)
          ++violations;
    }
  }

  // The backlog scenario against the FIFO oracle.
  Simulation sim(load_scenario(*bundled_scenario("fig8-backlog")));
  sim.run();
  const auto& sched = sim.scheduler();
  std::vector<std::pair<JobId, const SchedJob*>> pipeline;
  for (const auto& [id, j] : sched.jobs())
    if (j.request.target.kind == TargetKind::reservation) pipeline.push_back({id, &j});
  std::sort(pipeline.begin(), pipeline.end(), [](const auto& a, const auto& b) {
    return a.second->submit != b.second->submit ? a.second->submit < b.second->submit : a.first < b.first;
  });
  std::vector<std::pair<SimTime, SimDuration>> input;
  for (const auto& [id, j] : pipeline) input.push_back({j->submit, sim_seconds(j->request.duration_s)});
  const auto oracle = fifo_starts(input, sched.reservations().at(0).node_count);
  int mismatches = 0;
  double live_wait_before = 0, live_wait_after = 0;
  for (std::size_t i = 0; i < pipeline.size(); ++i) {
    const auto* j = pipeline[i].second;
    if (!j->start || *j->start != oracle[i]) ++mismatches;
    const auto& spec = sim.orchestrator().spec(pipeline[i].first);
    if (spec.reprocess || !j->start) continue;
    const double wait = to_seconds(*j->start - j->submit);
    (j->submit < at_seconds(500) ? live_wait_before : live_wait_after) =
        std::max(j->submit < at_seconds(500) ? live_wait_before : live_wait_after, wait);
  }
  const bool ok = violations == 0 && killed > 0 && mismatches == 0 && !pipeline.empty() &&
                  live_wait_after > live_wait_before;
  return {ok, fmt("200 random schedules: %d kills, %d batch allocations, %d violations; backlog: %zu jobs, %d "
                  "oracle mismatches, live wait %.0fs before reprocessing vs %.0fs during",
                  killed, checked, violations, pipeline.size(), mismatches, live_wait_before, live_wait_after)};
}

Verdict connections() {
  Store store;
  PoolOptions o;
  o.seed = 3;
  o.store = &store;
  const auto r = run_stage_job(make_images(32000), 320, default_profile(Stage::spotfinding), o);
  bool ok = r.connection_high_water <= 32 && store.connection_high_water() <= 32 && store.size() == 32000;
  std::string d = fmt("320 ranks: %d groups, high-water %d (job) / %d (store), %zu records; ", r.groups,
                      r.connection_high_water, store.connection_high_water(), store.size());

  const auto dir = scratch("atomicity");
  Store wal({dir});
  std::int64_t next = 0, visible = 0;
  int crashes = 0, bad = 0;
  RngStream rng(7, "crash");
  for (int round = 0; round < 40; ++round) {
    const auto n = 1 + static_cast<std::int64_t>(rng.next_u64() % 200);
    std::vector<ProgressRecord> batch;
    for (std::int64_t i = 0; i < n; ++i) {
      ProgressRecord rec;
      rec.run = 1;
      rec.image_index = next + i;
      batch.push_back(rec);
    }
    const bool crash = round % 2 == 0;
    if (crash) wal.inject_crash(rng.next_u64() % static_cast<std::uint64_t>(n));
    const auto c = wal.connect(kEpoch);
    try {
      wal.commit(c, batch, kEpoch);
      visible += n;
    } catch (const StoreUnavailable&) {
      ++crashes;
    }
    wal.close(c);
    next += n;
    if (static_cast<std::int64_t>(wal.size()) != visible) ++bad;
    Store reopened({dir});
    if (static_cast<std::int64_t>(reopened.size()) != visible) ++bad;
  }
  ok = ok && bad == 0 && crashes == 20;
  d += fmt("%d injected crashes, %d partial-visibility observations", crashes, bad);
  return {ok, d};
}

Verdict ingest() {
  const auto dir = scratch("ingest");
  Store store({dir});
  const int groups = 8;
  const double duration = 10.0;
  std::vector<std::int64_t> per_second(static_cast<std::size_t>(duration) + 1, 0);
  std::mutex mu;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::thread> threads;
  for (int g = 0; g < groups; ++g) {
    threads.emplace_back([&, g] {
      Batcher b(store, 10, g);
      std::int64_t i = 0;
      while (true) {
        const double t = wall_s(start);
        if (t >= duration) break;
        for (int k = 0; k < 50; ++k, ++i) {
          ProgressRecord rec;
          rec.run = g + 1;
          rec.image_index = i;
          rec.n_spots = 30;
          b.add(rec, g * 10 + k % 10, kEpoch);
        }
        b.flush(kEpoch);
        const auto sec = static_cast<std::size_t>(wall_s(start));
        std::lock_guard lock(mu);
        if (sec < per_second.size()) per_second[sec] += 50;
      }
    });
  }
  for (auto& t : threads) t.join();
  per_second.resize(static_cast<std::size_t>(duration));
  const auto worst = *std::min_element(per_second.begin(), per_second.end());
  const double mean = static_cast<double>(store.size()) / duration;
  return {worst >= 8000, fmt("%zu records in %.0fs over %d batchers: mean %.0f rec/s, slowest second %lld rec/s",
                             store.size(), duration, groups, mean, static_cast<long long>(worst))};
}

Verdict determinism() {
  std::string d;
  bool ok = true;
  for (const auto& name : bundled_scenario_names()) {
    const auto cfg = load_scenario(*bundled_scenario(name));
    const auto a = scratch("det_" + name + "_a");
    const auto b = scratch("det_" + name + "_b");
    run_scenario(cfg, a);
    run_scenario(cfg, b);
    const bool same = slurp(a / "summary.json") == slurp(b / "summary.json") && !slurp(a / "summary.json").empty();
    const bool replayed = replay(a / "events") == json::parse(slurp(a / "snapshot.json"));
    ok = ok && same && replayed;
    d += fmt("%s: summary %s, replay %s; ", name.c_str(), same ? "identical" : "DIFFERS", replayed ? "equal" : "DIFFERS");
  }
  return {ok, d};
}

Verdict api_fidelity() {
  auto doc = json::parse(R"({
    "name": "gating", "seed": 2, "horizon_s": 1500,
    "shift": {"runs": 1, "rate_hz": 120, "duration_s": 300, "gap_s": 0, "tags": ["g"]},
    "pool": {"nodes": 4},
    "orchestrator": {"stage_nodes": [1, 1, 1, 1], "ranks_per_node": 4},
    "api": {"token": "tok"}
  })");
  Simulation sim(parse_scenario(doc));
  ApiService api(sim, scratch("api_files"));
  auto call = [&](const std::string& method, const std::string& path, const json& body = nullptr) {
    ApiRequest r;
    r.method = method;
    r.path = path;
    r.headers["authorization"] = "Bearer tok";
    if (!body.is_null()) r.body = body.dump();
    return api.handle(r);
  };
  const auto st = call("GET", "/status/dtns");
  const auto parsed = nlohmann::ordered_json::parse(st.body);
  std::vector<std::string> keys;
  for (const auto& [k, _] : parsed.items()) keys.push_back(k);
  const std::vector<std::string> expect_keys{"name", "full_name", "description", "system_type", "notes", "status",
                                             "updated_at"};
  bool shape = st.status == 200 && keys == expect_keys && parsed["name"] == "dtns" &&
               parsed["full_name"] == "Data Transfer Nodes" && parsed["description"] == "System is active" &&
               parsed["system_type"] == "filesystem" && parsed["notes"] == json::array() &&
               parsed["status"] == "active" && parsed["updated_at"].is_string();

  // Take the destination down in the middle of the run's transfer, bring it back later.
  const double down = 340, up = 700;
  sim.run_until(at_seconds(down));
  const auto in_flight = sim.mover().bytes_delivered(1);
  call("POST", "/x-admin/status", {{"resource", "dtns"}, {"status", "unavailable"}});
  const bool refused = call("POST", "/storage/transfer", {{"run", 1}}).status == 409;
  sim.run_until(at_seconds(up));
  const auto during = sim.mover().bytes_delivered(1);
  call("POST", "/x-admin/status", {{"resource", "dtns"}, {"status", "active"}});
  sim.run();
  std::int64_t bytes_in_window = 0;
  for (const auto& r : sim.mover().records()) {
    const SimTime lo = std::max(r.start, at_seconds(down)), hi = std::min(r.end, at_seconds(up));
    if (hi > lo && r.bytes > 0) bytes_in_window += r.bytes;
  }
  const auto total = sim.facility().run(1).total_bytes();
  const bool gated = bytes_in_window == 0 && during == in_flight && refused &&
                     sim.mover().bytes_delivered(1) == total && in_flight > 0 && in_flight < total;
  return {shape && gated,
          fmt("fields %s; down %.0f-%.0fs: bytes moved in window %lld, delivered before %lld of %lld, all %s after",
              shape ? "match" : "DIFFER", down, up, static_cast<long long>(bytes_in_window),
              static_cast<long long>(in_flight), static_cast<long long>(total),
              sim.mover().bytes_delivered(1) == total ? "delivered" : "NOT delivered")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"survivor statistics", survivors},
      {"transfer timing", transfer_timing},
      {"turnaround histogram", turnaround},
      {"duration constraints", durations},
      {"weak scaling", weak_scaling},
      {"preemption contract", preemption},
      {"connection budget", connections},
      {"ingest rate", ingest},
      {"determinism and replay", determinism},
      {"api payload fidelity", api_fidelity},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %2zu %s: %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                v.detail.c_str(), wall_s(t0));
    std::fflush(stdout);
  }
  return failures;
}
