#include <doctest.h>

#include <fstream>
#include <sstream>

#include "beamtime/errors.hpp"
#include "beamtime/simulation.hpp"
#include "test_util.hpp"

using namespace beamtime;
using nlohmann::json;

namespace {

std::string pointer_of(const json& doc) {
  try {
    parse_scenario(doc);
  } catch (const ConfigError& e) {
    return e.pointer();
  }
  return "<accepted>";
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny() {
  return json::parse(R"({
    "name": "tiny", "seed": 5, "horizon_s": 600,
    "facility": {"image_bytes": 1000000},
    "shift": {"runs": 2, "rate_hz": 2, "duration_s": 60, "gap_s": 30, "tags": ["t"]},
    "link": {"nominal_rate": 1e9},
    "pool": {"nodes": 8},
    "orchestrator": {"stage_nodes": [1, 1, 1, 1], "ranks_per_node": 3},
    "campaign": {"datasets": [{"name": "all", "expr": [["t"]]}],
                 "trials": [{"at_s": 0, "params": {"datasets": [0]}}, {"at_s": 200, "params": {"datasets": [0]}}],
                 "tags": [{"at_s": 100, "run": 1, "tags": ["extra"]}]}
  })");
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config errors name the offending key") {
    CHECK(pointer_of(json::parse(R"({"shift":{"runs":2,"rate_hz":-40}})")) == "/shift/rate_hz");
    CHECK(pointer_of(json::parse(R"({"bogus":1})")) == "/bogus");
    CHECK(pointer_of(json::parse(R"({"link":{"nominal_rate":0}})")).rfind("/link", 0) == 0);
    CHECK(pointer_of(json::parse(R"({"pool":{"nodes":"many"}})")) == "/pool/nodes");
    CHECK(pointer_of(json::parse(R"({"reservations":[{"nodes":2},{"nodes":0}]})")) == "/reservations/1/nodes");
    CHECK(pointer_of(json::parse(R"({"flags":{"io_mode":"tape"}})")) == "/flags/io_mode");
    CHECK(pointer_of(json::parse(R"({"profiles":{"indexing":{"success_rate":2}}})")).rfind("/profiles", 0) == 0);
    CHECK(pointer_of(json::parse(R"({"campaign":{"trials":[{"at_s":0,"params":{"supersedes":3}}]}})"))
              .rfind("/campaign/trials/0", 0) == 0);
    CHECK(pointer_of(json::parse(R"({"status":{"events":[{"at_s":1,"resource":"moon","status":"active"}]}})"))
              .rfind("/status/events/0", 0) == 0);
    CHECK(pointer_of(tiny()) == "<accepted>");
    CHECK(pointer_of(json::object()) == "<accepted>");
  }

  TEST_CASE("unreadable and malformed files") {
    const auto dir = test_dir("cfg_files");
    CHECK_THROWS_AS(load_scenario(dir / "missing.json"), ConfigError);
    std::ofstream(dir / "broken.json") << "{\"shift\": ";
    CHECK_THROWS_AS(load_scenario(dir / "broken.json"), ConfigError);
  }

  TEST_CASE("bundled scenarios load") {
    const auto names = bundled_scenario_names();
    CHECK(names.size() == 4);
    for (const auto& n : {"lv95-shift", "p175-day", "bad-io-day", "fig8-backlog"}) {
      const auto p = bundled_scenario(n);
      REQUIRE(p);
      CHECK_NOTHROW(load_scenario(*p));
    }
    CHECK_FALSE(bundled_scenario("nope"));
  }

  TEST_CASE("same config and seed give byte-identical summaries and artifacts") {
    const auto a = test_dir("det_a");
    const auto b = test_dir("det_b");
    const auto cfg = parse_scenario(tiny());
    const auto sa = run_scenario(cfg, a);
    const auto sb = run_scenario(cfg, b);
    CHECK(sa.dump() == sb.dump());
    for (const auto* f : {"summary.json", "snapshot.json", "traces.csv", "jobs.json", "events/jobs.log",
                          "events/runs.log", "reports/turnaround.csv"})
      CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
    auto other = tiny();
    other["seed"] = 6;
    const auto sc = run_scenario(parse_scenario(other), test_dir("det_c"));
    CHECK(sc.dump() != sa.dump());
  }

  TEST_CASE("summary contents") {
    const auto out = test_dir("summary");
    const auto s = run_scenario(parse_scenario(tiny()), out);
    CHECK(s.at("runs").at("count") == 2);
    CHECK(s.at("runs").at("images") == 240);
    CHECK(s.at("survivors").contains("0"));
    CHECK(s.at("survivors").contains("1"));
    CHECK(s.at("survivors").at("0").at("spotfinding").at("processed") == 240);
    for (const auto* f : {"reports/turnaround.svg", "reports/transfer_rate.csv", "reports/utilization.svg",
                          "reports/commit_rate.csv", "reports/spotfinding.pdf.svg", "scenario.json"})
      CHECK_MESSAGE(std::filesystem::exists(out / f), f);
  }

  TEST_CASE("replay reconstructs the live snapshot") {
    const auto out = test_dir("replay_tiny");
    Simulation sim(parse_scenario(tiny()), out / "state");
    sim.run();
    sim.write_artifacts(out);
    CHECK(replay(out / "events") == sim.snapshot());
    CHECK(replay(out / "state" / "events") == sim.snapshot());
  }

  TEST_CASE("replay of empty and truncated logs") {
    const auto dir = test_dir("replay_bad");
    std::ofstream(dir / "runs.log").close();
    const auto empty = replay(dir / "runs.log");
    CHECK(empty == replay_events({}));
    CHECK(empty.at("runs").empty());
    CHECK(empty.at("jobs").empty());

    const auto out = test_dir("replay_src");
    run_scenario(parse_scenario(tiny()), out);
    const auto text = slurp(out / "events" / "runs.log");
    const auto second_nl = text.find('\n', text.find('\n') + 1);
    REQUIRE(second_nl != std::string::npos);
    std::ofstream(dir / "cut.log") << text.substr(0, second_nl + 1) << text.substr(second_nl + 1, 9);
    try {
      replay(dir / "cut.log");
      FAIL("expected CorruptLog");
    } catch (const CorruptLog& e) {
      CHECK(e.line() == 3);
    }
  }

  TEST_CASE("topic merge order") {
    std::vector<BusEvent> jobs{{"jobs", 0, at_seconds(5), EventKind::job_submitted, json::object()}};
    std::vector<BusEvent> runs{{"runs", 0, at_seconds(5), EventKind::run_concluded, json::object()},
                               {"runs", 1, at_seconds(1), EventKind::file_created, json::object()}};
    const auto merged = merge_topics({jobs, runs});
    REQUIRE(merged.size() == 3);
    CHECK(merged[0].topic == "runs");
    CHECK(merged[0].offset == 1);
    // at equal time, runs come before jobs
    CHECK(merged[1].topic == "runs");
    CHECK(merged[2].topic == "jobs");
  }
}
