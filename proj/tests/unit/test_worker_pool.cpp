#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "beamtime/errors.hpp"
#include "beamtime/worker_pool.hpp"

using namespace beamtime;

namespace {

std::vector<ImageRef> images(std::int64_t n, RunId run = 1) {
  std::vector<ImageRef> v;
  v.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) v.push_back({run, i, 0, i * 1000, at_seconds(i * 0.01), 1000});
  return v;
}

StageProfile flat(Stage s, double rate, double d) {
  StageProfile p;
  p.stage = s;
  p.success_rate = rate;
  p.duration = DistSpec::constant(d);
  p.init_io_s = 0.0;
  p.result_write_s = 0.0;
  return p;
}

PoolOptions free_db(std::uint64_t seed = 5) {
  PoolOptions o;
  o.seed = seed;
  o.db = {0.0, 0.0};
  return o;
}

// Oracle: P(X > x) for a lognormal with the given median and sigma.
double lognormal_tail(double median, double sigma, double x) {
  return 0.5 * std::erfc((std::log(x) - std::log(median)) / (sigma * std::sqrt(2.0)));
}

}  // namespace

TEST_SUITE("worker_pool") {
  TEST_CASE("stage_outcome corner cases") {
    RngStream rng(1, "x");
    const auto img = images(1)[0];
    CHECK(stage_outcome(img, flat(Stage::indexing, 0.0, 1.0), rng).outcome == Outcome::rejected);
    const auto d = stage_outcome(img, flat(Stage::indexing, 1.0, 2.0), rng);
    CHECK(d.outcome == Outcome::success);
    CHECK(d.duration_s == 2.0);
  }

  TEST_CASE("profile validation") {
    auto p = flat(Stage::spotfinding, 1.2, 1.0);
    CHECK_THROWS_AS(validate(p), ProfileInvalid);
    CHECK_THROWS_AS(run_stage_job(images(3), 4, p, free_db()), ProfileInvalid);
    p = flat(Stage::spotfinding, 0.5, 1.0);
    p.init_io_s = -1;
    CHECK_THROWS_AS(validate(p), ProfileInvalid);
    CHECK_THROWS_AS(run_stage_job(images(3), 1, flat(Stage::spotfinding, 1, 1), free_db()), ValidationError);
    const auto back = profile_from_json(to_json(default_profile(Stage::indexing)), flat(Stage::indexing, 1, 1));
    CHECK(to_json(back) == to_json(default_profile(Stage::indexing)));
  }

  TEST_CASE("constant service time makespan") {
    for (auto [n, r] : std::vector<std::pair<int, int>>{{100, 5}, {7, 8}, {1000, 33}, {1, 2}}) {
      const double d = 1.5;
      const auto res = run_stage_job(images(n), r, flat(Stage::spotfinding, 1.0, d), free_db());
      const double bound = std::ceil(static_cast<double>(n) / (r - 1)) * d;
      CHECK(std::abs(res.makespan_s - bound) <= d);
    }
  }

  TEST_CASE("empty image list") {
    const auto res = run_stage_job({}, 4, default_profile(Stage::spotfinding), free_db());
    CHECK(res.traces.empty());
    CHECK(res.makespan_s == 0.0);
  }

  TEST_CASE("exactly once and rank independent outcomes") {
    const auto in = images(3000);
    std::map<int, JobResult> by_r;
    for (int r : {2, 8, 64}) by_r[r] = run_stage_job(in, r, default_profile(Stage::indexing), free_db(99));
    for (const auto& [r, res] : by_r) {
      REQUIRE(res.traces.size() == in.size());
      std::set<std::int64_t> seen;
      for (std::size_t i = 0; i < in.size(); ++i) {
        CHECK(res.traces[i].image == in[i]);
        REQUIRE(res.traces[i].entries.size() == 1);
        CHECK(res.traces[i].rank >= 1);
        CHECK(res.traces[i].rank < r);
        seen.insert(res.traces[i].image.index);
      }
      CHECK(seen.size() == in.size());
      CHECK(res.records.size() == in.size());
    }
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto& a = by_r[2].traces[i].entries[0];
      const auto& b = by_r[64].traces[i].entries[0];
      CHECK(a.outcome == b.outcome);
      CHECK((a.end - a.start) == (b.end - b.start));
    }
  }

  TEST_CASE("rank timelines are ordered and non-overlapping; no consumer idles early") {
    auto p = default_profile(Stage::spotfinding);
    const auto res = run_stage_job(images(500), 16, p, free_db());
    for (const auto& tl : res.rank_timelines) {
      for (std::size_t i = 1; i < tl.segments.size(); ++i) CHECK(tl.segments[i].start >= tl.segments[i - 1].end);
    }
    // With free db and zero producer latency, a consumer is never idle while images remain: every
    // consumer's last compute ends no earlier than the last compute start of the job.
    SimTime last_start{};
    for (const auto& t : res.traces) last_start = std::max(last_start, t.entries[0].start);
    for (std::size_t k = 1; k < res.rank_timelines.size(); ++k) {
      CHECK(res.rank_timelines[k].segments.back().end >= last_start);
    }
  }

  TEST_CASE("chain: survivors shrink and feed the next stage") {
    std::array<StageProfile, 4> all_pass{flat(Stage::spotfinding, 1, 0.1), flat(Stage::indexing, 1, 0.1),
                                         flat(Stage::refinement, 1, 0.1), flat(Stage::integration, 1, 0.1)};
    const auto same = chain_stages(images(200), all_pass, {4, 4, 2, 2}, free_db());
    for (const auto& j : same) CHECK(j.survivor_count() == 200);

    std::array<StageProfile, 4> halves{flat(Stage::spotfinding, 0.5, 0.01), flat(Stage::indexing, 0.5, 0.01),
                                       flat(Stage::refinement, 1, 0.01), flat(Stage::integration, 1, 0.01)};
    const std::int64_t n = 10000;
    const auto chain = chain_stages(images(n), halves, {16, 16, 4, 4}, free_db(3));
    REQUIRE(chain.size() == 4);
    // Binomial oracle: stage-3 input ~ Bin(n, 0.25).
    const double mean = n * 0.25, sd = std::sqrt(n * 0.25 * 0.75);
    CHECK(std::abs(static_cast<double>(chain[2].traces.size()) - mean) <= 3 * sd);
    for (std::size_t s = 1; s < 4; ++s) {
      const auto prev = chain[s - 1].survivors();
      CHECK(chain[s].traces.size() == prev.size());
      for (std::size_t i = 0; i < prev.size(); ++i) CHECK(chain[s].traces[i].image == prev[i]);
      CHECK(chain[s].start >= chain[s - 1].end());
    }
  }

  TEST_CASE("production job shapes are accepted") {
    const auto chain = chain_stages(images(2000), default_profiles(), {896, 896, 64, 64}, free_db());
    CHECK(chain[0].ranks == 896);
    CHECK(chain[3].ranks == 64);
  }

  TEST_CASE("indexing tail: 2 to 3 percent above 2 s") {
    const auto p = default_profile(Stage::indexing);
    const auto in = images(100000, 4);
    int over = 0;
    for (const auto& img : in) {
      auto rng = image_stage_stream(17, 0, img, Stage::indexing);
      over += stage_outcome(img, p, rng).duration_s > 2.0;
    }
    const double frac = over / 1e5;
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.03);
    // Independent oracle from the mixture's closed form.
    const double expect = 0.975 * lognormal_tail(0.8, 0.25, 2) + 0.012 * lognormal_tail(2.5, 0.15, 2) +
                          0.013 * lognormal_tail(5.0, 0.15, 2);
    CHECK(std::abs(frac - expect) <= 4 * std::sqrt(expect * (1 - expect) / 1e5));
  }

  TEST_CASE("group batching bounds connections") {
    auto o = free_db();
    o.db = {0.005, 1e-5};
    const auto res = run_stage_job(images(20000), 320, default_profile(Stage::spotfinding), o);
    CHECK(res.groups == 32);
    CHECK(res.connection_high_water <= 32);
    CHECK(res.connection_high_water >= 2);
    std::size_t flushed = 0;
    for (const auto& f : res.flushes) {
      CHECK(f.records.size() <= 50);
      flushed += f.records.size();
    }
    CHECK(flushed == res.records.size());
  }

  TEST_CASE("shared filesystem stalls ranks unevenly") {
    auto o = free_db();
    const auto in = images(4000);
    const auto p = default_profile(Stage::spotfinding);
    const auto bb = run_stage_job(in, 64, p, o);
    o.io_mode = IoMode::shared;
    const auto shared = run_stage_job(in, 64, p, o);
    CHECK(rank_stall_spread_s(shared) > 3 * rank_stall_spread_s(bb));
    CHECK(shared.makespan_s > bb.makespan_s);
  }

  TEST_CASE("trace csv") {
    auto o = free_db();
    o.job_id = 12;
    const auto res = run_stage_job(images(2), 2, flat(Stage::refinement, 1, 2), o);
    const auto csv = trace_csv(res);
    CHECK(csv ==
          "job_id,image_id,rank,stage,start_ns,end_ns,outcome\n"
          "12,1:0,1,refinement,0,2000000000,success\n"
          "12,1:1,1,refinement,2000000000,4000000000,success\n");
  }
}
