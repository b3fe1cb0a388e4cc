#include <doctest.h>

#include <map>

#include "beamtime/errors.hpp"
#include "beamtime/scheduler.hpp"

using namespace beamtime;

namespace {

JobRequest req(int nodes, Target target, double duration, std::optional<double> exit_after = {}) {
  JobRequest r;
  r.nodes = nodes;
  r.target = target;
  r.duration_s = duration;
  r.exit_after_warning_s = exit_after;
  return r;
}

}  // namespace

TEST_SUITE("scheduler") {
  TEST_CASE("reservation capacity") {
    Kernel k;
    Scheduler s(k);
    CHECK_NOTHROW(s.create_reservation(64, kEpoch, at_seconds(3600)));
    CHECK_THROWS_AS(s.create_reservation(1, at_seconds(100), at_seconds(200)), CapacityExceeded);
    CHECK_NOTHROW(s.create_reservation(1, at_seconds(3600), at_seconds(4000)));  // no overlap
    CHECK_THROWS_AS(s.create_reservation(1, at_seconds(10), at_seconds(10)), ValidationError);
  }

  TEST_CASE("submit validation") {
    Kernel k;
    Scheduler s(k);
    CHECK_THROWS_AS(s.submit(req(65, Target::batch(), 1)), NodesExceedPool);
    CHECK_THROWS_AS(s.submit(req(0, Target::batch(), 1)), ValidationError);
    CHECK_THROWS_AS(s.submit(req(1, Target::urgent(5), 1)), UnknownReservation);
  }

  TEST_CASE("four one-node jobs on a three-node reservation") {
    Kernel k;
    Scheduler s(k);
    const auto r = s.create_reservation(3, kEpoch, at_seconds(1000));
    std::vector<JobId> ids;
    for (int i = 0; i < 4; ++i) ids.push_back(s.submit(req(1, Target::urgent(r), 100)));
    k.run_until(at_seconds(1));
    CHECK(s.running_count() == 3);
    CHECK(s.pending_count() == 1);
    CHECK(s.job(ids[3]).state == JobState::pending);
    k.run_until(at_seconds(150));
    CHECK(s.job(ids[3]).start == at_seconds(100));
  }

  TEST_CASE("a 28-node job and a 1-node job share a 64-node reservation") {
    Kernel k;
    Scheduler s(k);
    const auto r = s.create_reservation(64, kEpoch, at_seconds(1000));
    const auto big = s.submit(req(28, Target::urgent(r), 100));
    const auto small = s.submit(req(1, Target::urgent(r), 100));
    k.run_until(at_seconds(1));
    CHECK(s.job(big).state == JobState::running);
    CHECK(s.job(small).state == JobState::running);
    CHECK(s.nodes_in_use() == 29);
  }

  TEST_CASE("idle reservation is backfilled by preemptible work") {
    Kernel k;
    Scheduler s(k);
    const auto r = s.create_reservation(4, kEpoch, at_seconds(1000));
    const auto p = s.submit(req(4, Target::preemptible(r), 500));
    k.run_until(at_seconds(1));
    CHECK(s.job(p).state == JobState::running);
  }

  TEST_CASE("grace arithmetic: ignored signal and voluntary exit") {
    for (auto [exit_after, expected_start] : std::vector<std::pair<std::optional<double>, double>>{
             {std::nullopt, 160.0}, {10.0, 110.0}, {90.0, 160.0}}) {
      Kernel k;
      Scheduler s(k);
      const auto r = s.create_reservation(4, kEpoch, at_seconds(10000), 60.0);
      const auto p = s.submit(req(4, Target::preemptible(r), 5000, exit_after));
      JobId urgent = -1;
      k.schedule(at_seconds(100), "urgent", [&] { urgent = s.submit(req(2, Target::urgent(r), 50)); });
      k.run_until(at_seconds(400));
      const auto& pj = s.job(p);
      CHECK(pj.warned_at == at_seconds(100));
      CHECK(pj.state == JobState::preempted);
      const bool expect_kill = !exit_after || *exit_after >= 60.0;
      CHECK(pj.killed == expect_kill);
      CHECK(s.job(urgent).start == at_seconds(expected_start));
      // the automatic requeue carries the link back
      REQUIRE(pj.resubmitted_as);
      CHECK(s.job(*pj.resubmitted_as).resubmit_of == p);
    }
  }

  TEST_CASE("batch jobs avoid reserved nodes in their window") {
    Kernel k;
    Scheduler s(k, {8});
    s.create_reservation(6, at_seconds(100), at_seconds(500));
    // Fits before the window only if it ends by 100 s.
    const auto fits = s.submit(req(8, Target::batch(), 90));
    const auto waits = s.submit(req(4, Target::batch(), 200));
    k.run_until(at_seconds(1000));
    CHECK(s.job(fits).start == kEpoch);
    // After `fits` ends at 90 s only 2 unreserved nodes exist until 500 s.
    CHECK(s.job(waits).start == at_seconds(500));
  }

  TEST_CASE("utilization accounting") {
    {
      Kernel k;
      Scheduler s(k);
      k.run_until(at_seconds(100));
      const auto u = s.utilization_series(10);
      for (std::size_t b = 0; b < u.batch.size(); ++b) CHECK(u.total(b) == 0.0);
    }
    Kernel k;
    Scheduler s(k);
    s.submit(req(28, Target::batch(), 600));
    k.run_until(at_seconds(1200));
    const auto u = s.utilization_series(60);
    REQUIRE(u.batch.size() == 20);
    for (int b = 0; b < 10; ++b) CHECK(u.batch[b] == doctest::Approx(28.0));
    for (int b = 10; b < 20; ++b) CHECK(u.batch[b] == 0.0);
  }

  TEST_CASE("cancel only affects pending jobs") {
    Kernel k;
    Scheduler s(k, {2});
    const auto a = s.submit(req(2, Target::batch(), 100));
    const auto b = s.submit(req(2, Target::batch(), 100));
    k.run_until(at_seconds(1));
    CHECK_FALSE(s.cancel(a));
    CHECK(s.cancel(b));
    CHECK(s.job(b).state == JobState::failed);
  }

  TEST_CASE("property: grace, isolation and exclusive nodes over random schedules") {
    for (std::uint64_t seed = 1; seed <= 60; ++seed) {
      RngStream rng(seed, "sched-prop");
      Kernel k;
      SchedulerConfig cfg;
      cfg.total_nodes = 16;
      Scheduler s(k, cfg);
      std::vector<ReservationId> res;
      const int nres = 1 + static_cast<int>(rng.next_u64() % 2);
      for (int i = 0; i < nres; ++i) {
        const double t0 = rng.uniform01() * 500;
        const double grace = 5 + rng.uniform01() * 60;
        try {
          res.push_back(s.create_reservation(2 + static_cast<int>(rng.next_u64() % 5), at_seconds(t0),
                                             at_seconds(t0 + 300 + rng.uniform01() * 1500), grace));
        } catch (const CapacityExceeded&) {
        }
      }
      if (res.empty()) continue;
      for (int j = 0; j < 40; ++j) {
        const double at = rng.uniform01() * 2000;
        const auto kind = rng.next_u64() % 3;
        const auto r = res[rng.next_u64() % res.size()];
        const int nodes = 1 + static_cast<int>(rng.next_u64() % 4);
        const double dur = 10 + rng.uniform01() * 400;
        std::optional<double> exit_after;
        if (rng.uniform01() < 0.5) exit_after = rng.uniform01() * 100;
        k.schedule(at_seconds(at), "submit", [&s, kind, r, nodes, dur, exit_after] {
          const Target t = kind == 0 ? Target::urgent(r) : kind == 1 ? Target::preemptible(r) : Target::batch();
          try {
            s.submit(req(nodes, t, dur, exit_after));
          } catch (const NodesExceedPool&) {
          }
        });
      }
      k.run_until(at_seconds(20000));

      for (const auto& [id, j] : s.jobs()) {
        if (j.killed) {
          REQUIRE(j.warned_at);
          REQUIRE(j.end);
          const auto& r = s.reservations().at(j.request.target.reservation);
          CHECK(to_seconds(*j.end - *j.warned_at) >= r.grace_s - 1e-9);
        }
      }
      const auto allocs = s.allocations();
      for (const auto& a : allocs) {
        if (a.kind != TargetKind::batch) continue;
        for (const auto& [rid, r] : s.reservations()) {
          const bool reserved_node = std::find(r.nodes.begin(), r.nodes.end(), a.node) != r.nodes.end();
          const bool overlaps = a.start < r.t1 && a.end > r.t0;
          CHECK_FALSE((reserved_node && overlaps));
        }
      }
      std::map<int, std::vector<std::pair<SimTime, SimTime>>> per_node;
      for (const auto& a : allocs) per_node[a.node].push_back({a.start, a.end});
      for (auto& [node, v] : per_node) {
        std::sort(v.begin(), v.end());
        for (std::size_t i = 1; i < v.size(); ++i) CHECK(v[i].first >= v[i - 1].second);
      }
    }
  }
}
