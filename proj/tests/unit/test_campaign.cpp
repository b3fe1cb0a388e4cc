#include <doctest.h>

#include "beamtime/campaign.hpp"
#include "beamtime/errors.hpp"

using namespace beamtime;

namespace {

struct Rig {
  EventBus bus;
  SimTime now{};
  Campaign campaign{bus, [this] { return now; }};
  Rig() {
    for (RunId r = 1; r <= 3; ++r) campaign.register_run(r);
  }
};

}  // namespace

TEST_SUITE("campaign") {
  TEST_CASE("tags accumulate per run") {
    Rig rig;
    rig.campaign.tag_run(1, {"batch1"});
    const auto tags = rig.campaign.tag_run(1, {"ligand3"});
    CHECK(tags == std::set<std::string>{"batch1", "ligand3"});
    CHECK(rig.campaign.tag_run(1, {"batch1"}) == tags);
    CHECK(rig.bus.length("campaign") == 2);  // re-adding publishes nothing
    CHECK_THROWS_AS(rig.campaign.tag_run(1, {""}), ValidationError);
    CHECK_THROWS_AS(rig.campaign.tag_run(99, {"x"}), UnknownRun);
    CHECK_THROWS_AS(rig.campaign.tag_run(1, {"has space"}), ValidationError);
  }

  TEST_CASE("trial ids are dense and trials freeze") {
    Rig rig;
    CHECK(rig.campaign.create_trial(nlohmann::json::object()) == 0);
    CHECK(rig.campaign.create_trial(nlohmann::json::object()) == 1);
    CHECK(rig.campaign.create_trial(nlohmann::json::object()) == 2);
    rig.campaign.freeze_trial(2);
    CHECK_THROWS_AS(rig.campaign.update_trial(2, {{"comment", "x"}}), TrialFrozen);
    const auto before = rig.campaign.trial(2).raw_params;
    CHECK(rig.campaign.create_trial({{"comment", "retry"}}) == 3);
    CHECK(rig.campaign.trial(2).raw_params == before);
    CHECK_THROWS_AS(rig.campaign.trial(42), UnknownTrial);
  }

  TEST_CASE("trial schema violations") {
    Rig rig;
    CHECK_THROWS_AS(rig.campaign.create_trial({{"stages", {{"indexing", {{"success_rate", 1.2}}}}}}), SchemaViolation);
    CHECK_THROWS_AS(rig.campaign.create_trial({{"stages", {{"bogus", {}}}}}), SchemaViolation);
    CHECK_THROWS_AS(rig.campaign.create_trial({{"datasets", {7}}}), SchemaViolation);
    CHECK_THROWS_AS(rig.campaign.create_trial({{"stages", {{"indexing", {{"nodes", 0}}}}}}), SchemaViolation);
    CHECK_THROWS_AS(rig.campaign.create_trial({{"unknown_key", 1}}), SchemaViolation);
    CHECK_THROWS_AS(rig.campaign.create_trial(nlohmann::json::array()), SchemaViolation);
    const auto p = parse_trial_params({{"stages", {{"indexing", {{"success_rate", 0.1}, {"duration", {{"constant", 2}}}}}}}});
    REQUIRE(p.stages.contains(Stage::indexing));
    CHECK(*p.stages.at(Stage::indexing).success_rate == 0.1);
  }

  TEST_CASE("supersedes deactivates the older trial") {
    Rig rig;
    rig.campaign.create_trial(nlohmann::json::object());
    rig.campaign.create_trial({{"supersedes", 0}});
    CHECK_FALSE(rig.campaign.trial(0).active);
    CHECK(rig.campaign.trial(1).active);
  }

  TEST_CASE("dataset resolution is OR of ANDs") {
    Rig rig;
    rig.campaign.tag_run(1, {"batch1"});
    rig.campaign.tag_run(2, {"batch1", "ligand3"});
    rig.campaign.tag_run(3, {"ligand3"});
    const auto a = rig.campaign.create_dataset("a", {{"batch1"}});
    const auto b = rig.campaign.create_dataset("b", {{"batch1"}, {"ligand3"}});
    const auto c = rig.campaign.create_dataset("c", {{"batch1", "ligand3"}});
    CHECK(rig.campaign.resolve_dataset(a) == std::vector<RunId>{1, 2});
    CHECK(rig.campaign.resolve_dataset(b) == std::vector<RunId>{1, 2, 3});
    CHECK(rig.campaign.resolve_dataset(c) == std::vector<RunId>{2});
    CHECK_THROWS_AS(rig.campaign.resolve_dataset(9), UnknownDataset);
    CHECK_THROWS_AS(rig.campaign.create_dataset("e", {}), EmptyExpression);
    CHECK_THROWS_AS(rig.campaign.create_dataset("e", {{}}), EmptyExpression);
    CHECK_THROWS_AS(rig.campaign.create_dataset("e", {{"never-declared"}}), ValidationError);
  }

  TEST_CASE("adding tags never shrinks a dataset") {
    Rig rig;
    rig.campaign.declare_tag("x");
    rig.campaign.declare_tag("y");
    const auto d = rig.campaign.create_dataset("xy", {{"x", "y"}, {"x"}});
    std::size_t last = 0;
    for (auto [run, tag] : std::vector<std::pair<RunId, std::string>>{{1, "y"}, {1, "x"}, {2, "x"}, {3, "y"}, {3, "x"}}) {
      rig.campaign.tag_run(run, {tag});
      const auto n = rig.campaign.resolve_dataset(d).size();
      CHECK(n >= last);
      last = n;
    }
    CHECK(last == 3);
  }

  TEST_CASE("snapshot carries runs, tags, trials and datasets") {
    Rig rig;
    rig.campaign.tag_run(2, {"batch1"});
    rig.campaign.create_dataset("d", {{"batch1"}});
    rig.campaign.create_trial({{"datasets", {0}}});
    const auto s = rig.campaign.snapshot();
    CHECK(s.at("runs").size() == 3);
    CHECK(s.at("tags") == nlohmann::json{"batch1"});
    CHECK(s.at("trials").size() == 1);
    CHECK(s.at("datasets")[0].at("runs") == nlohmann::json{2});
  }
}
