#include <doctest.h>

#include <cmath>
#include <numeric>

#include "beamtime/data_mover.hpp"
#include "beamtime/errors.hpp"
#include "beamtime/facility.hpp"
#include "beamtime/status_board.hpp"
#include "test_util.hpp"

using namespace beamtime;

namespace {

FileAsset file(RunId run, int i, std::int64_t bytes, FileKind kind = FileKind::data) {
  return {"/exp/r" + std::to_string(run) + "/f" + std::to_string(i), kind, bytes, run};
}

BusEvent created(const FileAsset& f, SimTime t) { return {"runs", 0, t, EventKind::file_created, to_json(f)}; }
BusEvent concluded(RunId run, SimTime t) {
  return {"runs", 0, t, EventKind::run_concluded, {{"run", run}, {"image_count", 0}, {"end_ns", to_ns(t)}}};
}

struct Rig {
  Kernel kernel;
  EventBus bus;
  StatusBoard status;
  DataMover mover;
  explicit Rig(MoverConfig cfg = {}) : mover(kernel, bus, &status, std::move(cfg), 1) {}
};

}  // namespace

TEST_SUITE("data_mover") {
  TEST_CASE("files group under their run, idempotently") {
    Rig rig;
    for (int i = 0; i < 15; ++i) rig.mover.on_event(created(file(7, i, 100), kEpoch));
    CHECK(rig.mover.on_event(created(file(7, 3, 100), kEpoch)) == 0);
    rig.mover.on_event(concluded(7, kEpoch));
    const auto q = rig.mover.queue();
    REQUIRE(q.size() == 1);
    CHECK(q[0].run_id == 7);
    CHECK(q[0].files.size() == 15);
  }

  TEST_CASE("a run is not dispatchable before it concludes") {
    Rig rig;
    rig.mover.on_event(created(file(1, 0, 100), kEpoch));
    CHECK(rig.mover.dispatch(4).empty());
    rig.mover.on_event(concluded(1, at_seconds(1)));
    CHECK(rig.mover.dispatch(4).size() == 1);
  }

  TEST_CASE("oldest concluded run goes first regardless of run id") {
    Rig rig;
    rig.mover.on_event(created(file(3, 0, 100), kEpoch));
    rig.mover.on_event(created(file(2, 0, 100), kEpoch));
    rig.mover.on_event(concluded(3, at_seconds(1)));
    rig.mover.on_event(concluded(2, at_seconds(2)));
    const auto a = rig.mover.dispatch(1);
    REQUIRE(a.size() == 1);
    CHECK(a[0].run_id == 3);
  }

  TEST_CASE("empty queue dispatches nothing") {
    Rig rig;
    CHECK(rig.mover.dispatch(3).empty());
    CHECK_THROWS_AS(rig.mover.dispatch(0), ValidationError);
  }

  TEST_CASE("unavailable destination refuses dispatch and keeps the queue") {
    Rig rig;
    rig.mover.on_event(created(file(1, 0, 100), kEpoch));
    rig.mover.on_event(concluded(1, kEpoch));
    rig.status.set_status("dtns", Health::degraded, kEpoch);
    rig.status.set_status("dtns", Health::unavailable, kEpoch);
    CHECK_THROWS_AS(rig.mover.dispatch(1), DestinationUnavailable);
    CHECK(rig.mover.queue().size() == 1);
  }

  TEST_CASE("transfer durations follow size over rate") {
    LinkProfile link;  // 2.6 GB/s
    const Assignment a{1, file(1, 0, 150'000'000'000LL), 1};
    const auto r = DataMover::execute_transfer(a, link, kEpoch);
    CHECK(to_seconds(r.end - r.start) == doctest::Approx(150.0 / 2.6).epsilon(1e-9));

    LinkProfile slow;
    slow.degradation.push_back({kEpoch, 5.0});
    const auto r5 = DataMover::execute_transfer(a, slow, kEpoch);
    CHECK(to_seconds(r5.end - r5.start) == doctest::Approx(5 * 150.0 / 2.6).epsilon(1e-9));

    LinkProfile lat;
    lat.per_file_latency_s = 1.5;
    const auto r0 = DataMover::execute_transfer({1, file(1, 1, 0), 1}, lat, at_seconds(2));
    CHECK(r0.end - r0.start == sim_seconds(1.5));
  }

  TEST_CASE("degradation applies piecewise during a transfer") {
    LinkProfile link;
    link.nominal_rate = 1e9;
    link.degradation = {{at_seconds(10), 4.0}, {at_seconds(20), 1.0}};
    // 10 GB at 1 GB/s for 10 s, 0.25 GB/s for 10 s (2.5 GB), then 1 GB/s.
    const auto r = DataMover::execute_transfer({1, file(1, 0, 20'000'000'000LL), 1}, link, kEpoch);
    CHECK(to_seconds(r.end) == doctest::Approx(20.0 + 7.5).epsilon(1e-9));
    CHECK_THROWS(link_from_json({{"nominal_rate", -1.0}}));
    CHECK_THROWS_AS(link_from_json({{"bogus", 1}}), ConfigError);
  }

  TEST_CASE("throughput series") {
    Rig empty;
    for (double v : empty.mover.throughput_series(10.0)) CHECK(v == 0.0);

    Rig rig;
    rig.mover.start();
    const std::int64_t bytes = 150'000'000'000LL;
    rig.bus.publish("runs", EventKind::file_created, to_json(file(1, 0, bytes)), kEpoch);
    rig.bus.publish("runs", EventKind::run_concluded, {{"run", 1}, {"image_count", 0}, {"end_ns", 0}}, kEpoch);
    rig.kernel.run_until(at_seconds(100));
    const auto s = rig.mover.throughput_series(10.0);
    // Oracle: one transfer from 0 to 57.69 s at 2.6e9 B/s; full bins read the rate exactly.
    REQUIRE(s.size() == 6);
    for (int b = 0; b < 5; ++b) CHECK(s[b] == doctest::Approx(2.6e9).epsilon(1e-6));
    CHECK(s[5] == doctest::Approx(2.6e9 * (150.0 / 2.6 - 50.0) / 10.0).epsilon(1e-6));
    const double moved = std::accumulate(s.begin(), s.end(), 0.0) * 10.0;
    CHECK(moved == doctest::Approx(static_cast<double>(bytes)).epsilon(1e-6));
  }

  TEST_CASE("end to end: ordering, byte conservation and availability") {
    Kernel kernel;
    EventBus bus;
    StatusBoard status;
    FacilityConfig fc;
    Facility facility(kernel, bus, fc, 3);
    DataMover mover(kernel, bus, &status, {}, 3);
    mover.start();
    std::vector<RunId> runs;
    for (int i = 0; i < 3; ++i) {
      kernel.schedule(at_seconds(i * 200.0), "run", [&] { runs.push_back(facility.start_run("p", 120, sim_seconds(150))); });
    }
    kernel.run_until(at_seconds(2000));
    REQUIRE(runs.size() == 3);
    std::optional<SimTime> prev;
    for (auto r : runs) {
      CHECK(facility.run(r).state == RunState::available_remote);
      CHECK(mover.bytes_delivered(r) == facility.run(r).total_bytes());
      const auto done = mover.run_completed_at(r);
      REQUIRE(done);
      if (prev) CHECK(*prev <= *done);
      prev = done;
      // 150 s at 120 Hz x 8 MB = 144 GB, well under 3 minutes at 2.6 GB/s.
      CHECK(to_seconds(*done - *mover.run_concluded_at(r)) <= 180.0);
    }
  }

  TEST_CASE("injected faults retry with exponential backoff") {
    Kernel kernel;
    EventBus bus;
    MoverConfig cfg;
    DataMover mover(kernel, bus, nullptr, cfg, 1);
    mover.start();
    const auto f = file(1, 0, 2'600'000'000LL);  // 1 s on the wire
    mover.inject_faults(f.path, 2);
    bus.publish("runs", EventKind::file_created, to_json(f), kEpoch);
    bus.publish("runs", EventKind::run_concluded, {{"run", 1}, {"image_count", 0}, {"end_ns", 0}}, kEpoch);
    kernel.run_until(at_seconds(1000));
    const auto& recs = mover.records();
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].outcome == TransferOutcome::faulted);
    // fails at 1 s, waits 10 s; fails at 12 s, waits 20 s; succeeds 32..33 s.
    CHECK(recs[1].start == at_seconds(11));
    CHECK(recs[2].start == at_seconds(32));
    CHECK(recs[2].outcome == TransferOutcome::completed);
    CHECK(mover.run_completed_at(1) == at_seconds(33));
  }

  TEST_CASE("five failures mark the run failed") {
    Kernel kernel;
    EventBus bus;
    DataMover mover(kernel, bus, nullptr, {}, 1);
    mover.start();
    const auto f = file(1, 0, 1000);
    mover.inject_faults(f.path, 10);
    bus.publish("runs", EventKind::file_created, to_json(f), kEpoch);
    bus.publish("runs", EventKind::run_concluded, {{"run", 1}, {"image_count", 0}, {"end_ns", 0}}, kEpoch);
    kernel.run_until(at_seconds(10000));
    CHECK(mover.records().size() == 5);
    CHECK(mover.run_failed(1));
    CHECK_FALSE(mover.run_completed_at(1));
  }

  TEST_CASE("no bytes move while the destination is unavailable") {
    Kernel kernel;
    EventBus bus;
    StatusBoard status;
    DataMover mover(kernel, bus, &status, {}, 1);
    mover.start();
    const auto f = file(1, 0, 26'000'000'000LL);  // 10 s
    bus.publish("runs", EventKind::file_created, to_json(f), kEpoch);
    bus.publish("runs", EventKind::run_concluded, {{"run", 1}, {"image_count", 0}, {"end_ns", 0}}, kEpoch);
    kernel.schedule(at_seconds(4), "down", [&] { status.set_status("dtns", Health::unavailable, kernel.now()); });
    kernel.schedule(at_seconds(50), "up", [&] { status.set_status("dtns", Health::active, kernel.now()); });
    kernel.run_until(at_seconds(200));
    for (const auto& r : mover.records()) {
      const bool overlaps = r.start < at_seconds(50) && r.end > at_seconds(4);
      if (r.outcome != TransferOutcome::aborted) CHECK_FALSE(overlaps);
    }
    CHECK(mover.run_completed_at(1) == at_seconds(60));
  }

  TEST_CASE("persistent queue survives a restart") {
    const auto dir = test_dir("mover_queue");
    MoverConfig cfg;
    cfg.queue_file = dir / "queue.log";
    const auto f = file(4, 0, 5000);
    {
      Kernel kernel;
      EventBus bus;
      DataMover mover(kernel, bus, nullptr, cfg, 1);
      mover.on_event(created(f, kEpoch));
      mover.on_event(concluded(4, kEpoch));
    }
    Kernel kernel;
    EventBus bus;
    DataMover again(kernel, bus, nullptr, cfg, 1);
    const auto q = again.queue();
    REQUIRE(q.size() == 1);
    CHECK(q[0].run_id == 4);
    CHECK(q[0].files.size() == 1);
    CHECK(again.dispatch(1).size() == 1);
  }
}
