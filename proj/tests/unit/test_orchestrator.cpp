#include <doctest.h>

#include "beamtime/data_mover.hpp"
#include "beamtime/errors.hpp"
#include "beamtime/orchestrator.hpp"
#include "beamtime/status_board.hpp"

using namespace beamtime;

namespace {

StageProfile instant(Stage s, double rate = 1.0) {
  StageProfile p;
  p.stage = s;
  p.success_rate = rate;
  p.duration = DistSpec::constant(0.0);
  p.init_io_s = 0.0;
  p.result_write_s = 0.0;
  return p;
}

MoverConfig fast_link() {
  MoverConfig m;
  m.link.nominal_rate = 1e15;
  return m;
}

OrchestratorConfig small(std::array<StageProfile, 4> profiles = default_profiles()) {
  OrchestratorConfig c;
  c.profiles = profiles;
  c.stage_nodes = {2, 2, 1, 1};
  c.ranks_per_node = 4;
  c.db = {0.0, 0.0};
  c.seed = 9;
  return c;
}

// Runs are tagged "beam" as they conclude, like the simulation does.
struct Rig {
  Kernel kernel;
  EventBus bus;
  StatusBoard status;
  Facility facility;
  Campaign campaign;
  Scheduler scheduler;
  Store store;
  DataMover mover;
  Orchestrator orch;

  explicit Rig(OrchestratorConfig cfg = small(), FacilityConfig fc = {})
      : facility(kernel, bus, fc, 1),
        campaign(bus, [this] { return kernel.now(); }),
        scheduler(kernel, {16}),
        mover(kernel, bus, &status, fast_link(), 1),
        orch(kernel, bus, facility, campaign, scheduler, store, cfg) {
    campaign.declare_tag("beam");
  }

  void start() {
    orch.start();
    bus.add_observer([this](const BusEvent& ev) {
      if (ev.kind != EventKind::run_concluded) return;
      const auto run = ev.payload.at("run").get<RunId>();
      kernel.schedule(kernel.now(), "tag", [this, run] { campaign.tag_run(run, {"beam"}); });
    });
    mover.start();
  }

  void runs_at(const std::vector<double>& starts, double rate_hz, double duration_s) {
    for (double t : starts)
      kernel.schedule(at_seconds(t), "run", [this, rate_hz, duration_s] {
        facility.start_run("beam", rate_hz, sim_seconds(duration_s));
      });
  }
};

}  // namespace

TEST_SUITE("orchestrator") {
  TEST_CASE("an available matching run gets exactly one spotfinding job") {
    Rig rig;
    const auto ds = rig.campaign.create_dataset("all", {{"beam"}});
    rig.campaign.create_trial({{"datasets", {ds}}});
    // Drive the run to the remote site by hand, without the automatic loop.
    const auto run = rig.facility.start_run("beam", 10, sim_seconds(5));
    rig.kernel.run_until(at_seconds(6));
    rig.campaign.register_run(run);
    rig.campaign.tag_run(run, {"beam"});
    CHECK(rig.orch.sync_cycle().empty());  // still at the facility
    rig.facility.advance_state(run, RunState::transferring);
    rig.facility.advance_state(run, RunState::available_remote);
    const auto first = rig.orch.sync_cycle();
    REQUIRE(first.size() == 1);
    CHECK(first[0].stage == Stage::spotfinding);
    CHECK(first[0].run_id == run);
    CHECK(first[0].input.size() == 50);
    CHECK(first[0].nodes == 2);
    CHECK(rig.orch.sync_cycle().empty());
    CHECK_THROWS_AS(rig.campaign.update_trial(0, {{"comment", "x"}}), TrialFrozen);
  }

  TEST_CASE("stages chain over survivors until integration") {
    Rig rig(small({instant(Stage::spotfinding, 0.5), instant(Stage::indexing, 0.5), instant(Stage::refinement),
                   instant(Stage::integration)}));
    rig.campaign.create_trial({{"datasets", {rig.campaign.create_dataset("all", {{"beam"}})}}});
    rig.start();
    rig.runs_at({0}, 20, 30);
    rig.kernel.run_until(at_seconds(300));
    std::map<Stage, std::vector<JobSpec>> by_stage;
    for (const auto& [id, s] : rig.orch.specs()) by_stage[s.stage].push_back(s);
    for (auto s : kStages) REQUIRE(by_stage[s].size() == 1);
    const auto counts = rig.store.query_progress({1, 0, std::nullopt});
    CHECK(counts.at(Stage::spotfinding).processed == 600);
    for (std::size_t s = 1; s < 4; ++s) {
      CHECK(by_stage[kStages[s]][0].input.size() ==
            static_cast<std::size_t>(counts.at(kStages[s - 1]).succeeded));
      CHECK(by_stage[kStages[s]][0].upstream == by_stage[kStages[s - 1]][0].job_id);
      CHECK(by_stage[kStages[s]][0].nodes <= by_stage[kStages[s - 1]][0].nodes);
    }
  }

  TEST_CASE("zero survivors stops the chain and marks the run exhausted") {
    Rig rig(small());
    const auto ds = rig.campaign.create_dataset("all", {{"beam"}});
    rig.campaign.create_trial({{"datasets", {ds}}, {"stages", {{"spotfinding", {{"success_rate", 0.0}}}}}});
    rig.start();
    rig.runs_at({0}, 10, 10);
    rig.kernel.run_until(at_seconds(200));
    CHECK(rig.orch.specs().size() == 1);
    CHECK(rig.orch.exhausted(1, 0) == Stage::spotfinding);
  }

  TEST_CASE("a new trial reprocesses all prior runs oldest first") {
    OrchestratorConfig cfg = small({instant(Stage::spotfinding), instant(Stage::indexing), instant(Stage::refinement),
                                    instant(Stage::integration)});
    cfg.last_stage = Stage::spotfinding;
    Rig rig(cfg);
    const auto ds = rig.campaign.create_dataset("all", {{"beam"}});
    rig.campaign.create_trial({{"datasets", {ds}}});
    rig.start();
    std::vector<double> starts;
    for (int i = 0; i < 10; ++i) starts.push_back(i * 20.0);
    rig.runs_at(starts, 2, 10);
    rig.kernel.run_until(at_seconds(400));
    const auto before = rig.store.query_progress({std::nullopt, 0, std::nullopt});

    const auto t1 = rig.campaign.create_trial({{"datasets", {ds}}});
    const auto plan = rig.orch.on_trial_created(t1);
    REQUIRE(plan.size() == 10);
    for (std::size_t i = 0; i < plan.size(); ++i) {
      CHECK(plan[i].run_id == static_cast<RunId>(i + 1));
      CHECK(plan[i].reprocess);
      CHECK(plan[i].trial_id == t1);
    }
    rig.kernel.run_until(at_seconds(800));
    // The old trial's records are untouched.
    CHECK(rig.store.query_progress({std::nullopt, 0, std::nullopt}) == before);
    CHECK(rig.store.query_progress({std::nullopt, t1, std::nullopt}).n_spotfound() == before.n_spotfound());

    rig.campaign.declare_tag("nothing");
    const auto empty_ds = rig.campaign.create_dataset("none", {{"nothing"}});
    const auto t2 = rig.campaign.create_trial({{"datasets", {empty_ds}}});
    CHECK(rig.orch.on_trial_created(t2).empty());
  }

  TEST_CASE("every job traces back to a run, dataset and trial") {
    Rig rig(small());
    const auto ds = rig.campaign.create_dataset("all", {{"beam"}});
    rig.campaign.create_trial({{"datasets", {ds}}});
    rig.start();
    rig.runs_at({0, 40}, 10, 20);
    rig.kernel.run_until(at_seconds(600));
    CHECK(rig.orch.specs().size() >= 2);
    for (const auto& [id, s] : rig.orch.specs()) {
      CHECK(rig.facility.has_run(s.run_id));
      CHECK_NOTHROW(rig.campaign.dataset(s.dataset_id));
      CHECK_NOTHROW(rig.campaign.trial(s.trial_id));
      CHECK(rig.scheduler.job(id).state == JobState::done);
    }
    const auto snap = rig.orch.snapshot();
    CHECK(snap.is_object());
  }

  TEST_CASE("turnaround of one instantly processed image equals the run conclude time") {
    Rig rig(small({instant(Stage::spotfinding), instant(Stage::indexing), instant(Stage::refinement),
                   instant(Stage::integration)}));
    CHECK_THROWS_AS(rig.orch.turnaround_report(), EmptyResult);
    rig.campaign.create_trial({{"datasets", {rig.campaign.create_dataset("all", {{"beam"}})}}});
    rig.start();
    rig.runs_at({0}, 1, 1);
    rig.kernel.run_until(at_seconds(100));
    const auto rep = rig.orch.turnaround_report();
    REQUIRE(rep.samples.size() == 1);
    CHECK(rep.samples[0].delta_s > 0.0);
    CHECK(rep.samples[0].delta_s == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(rep.histogram.bin_s == 60.0);
  }

  TEST_CASE("manual submission errors") {
    Rig rig(small());
    const auto ds = rig.campaign.create_dataset("all", {{"beam"}});
    rig.campaign.create_trial({{"datasets", {ds}}});
    CHECK_THROWS_AS(rig.orch.submit_manual(Stage::spotfinding, ds, 0, 7, 1, Target::batch()), UnknownRun);
    CHECK_THROWS_AS(rig.orch.submit_manual(Stage::spotfinding, ds, 5, 7, 1, Target::batch()), UnknownTrial);
    const auto run = rig.facility.start_run("beam", 1, sim_seconds(2));
    CHECK_THROWS_AS(rig.orch.submit_manual(Stage::spotfinding, ds, 0, run, 1, Target::batch()), InvalidState);
    rig.kernel.run_until(at_seconds(3));
    rig.facility.advance_state(run, RunState::transferring);
    rig.facility.advance_state(run, RunState::available_remote);
    CHECK_THROWS_AS(rig.orch.submit_manual(Stage::spotfinding, ds, 0, run, 17, Target::batch()), NodesExceedPool);
    CHECK(rig.orch.submit_manual(Stage::spotfinding, ds, 0, run, 1, Target::batch()).job_id >= 0);
  }
}
