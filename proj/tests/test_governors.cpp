#include "sds/bench.hpp"
#include "sds/governors.hpp"

#include <doctest.h>

using namespace sds;

namespace {

const FrequencyTable& table() {
    static const FrequencyTable t({576, 883, 1190, 1510}, {204, 344, 484, 625});
    return t;
}

Observation obs(double temp, std::size_t cpu, std::size_t gpu) {
    Observation o;
    o.cpu_temp = o.gpu_temp = temp;
    o.cpu_level = cpu;
    o.gpu_level = gpu;
    o.slack_ms = 450;
    return o;
}

}  // namespace

TEST_CASE("fixed governor") {
    FixedGovernor g({3, 3}, table());
    const LatencyConstraint L(450);
    CHECK(g.first(obs(30, 0, 0), L) == Action{3, 3});
    CHECK(g.first(obs(95, 1, 2), L) == Action{3, 3});
    CHECK(g.second(obs(95, 1, 2), {0, 0}, L) == Action{3, 3});
    CHECK(g.decisions_per_frame() == 0);
    CHECK_THROWS_AS(FixedGovernor({4, 0}, table()), DomainError);
}

TEST_CASE("ondemand rule") {
    CHECK(OndemandGovernor::next_level(1, 1.0, 4, 0.8, 1) == 3);
    CHECK(OndemandGovernor::next_level(3, 0.5, 4, 0.8, 1) == 2);
    CHECK(OndemandGovernor::next_level(0, 0.5, 4, 0.8, 1) == 0);
    CHECK(OndemandGovernor::next_level(3, 0.8, 4, 0.8, 1) == 2);
    for (std::size_t level = 0; level < 6; ++level) {
        for (double u : {0.0, 0.3, 0.8, 0.81, 1.0}) {
            const auto next = OndemandGovernor::next_level(level, u, 4, 0.8, 2);
            CHECK(next <= 3);
        }
    }
    CHECK_THROWS_AS(OndemandGovernor(table(), 1.5), DomainError);
}

TEST_CASE("ondemand follows the utilization of the last frame") {
    OndemandGovernor g(table());
    const LatencyConstraint L(450);
    CHECK(g.first(obs(40, 0, 0), L) == Action{3, 3});  // starts saturated
    FrameTrace t;
    t.total_ms = 400;
    t.cpu_busy_ms = 60;
    t.gpu_busy_ms = 340;
    g.frame_done(t);
    CHECK(g.cpu_utilization() == doctest::Approx(0.15));
    CHECK(g.gpu_utilization() == doctest::Approx(0.85));
    CHECK(g.first(obs(40, 3, 1), L) == Action{2, 3});
    CHECK(g.second(obs(40, 3, 1), {2, 3}, L) == Action{2, 3});
}

TEST_CASE("make_governor") {
    CHECK(make_governor("fixed", table(), std::nullopt, std::nullopt)->name() == "fixed");
    CHECK(make_governor("ondemand", table(), std::nullopt, std::nullopt)->name() == "ondemand");
    CHECK_THROWS(make_governor("sds", table(), std::nullopt, std::nullopt));
    CHECK_THROWS(make_governor("ztt", table(), std::filesystem::path("/nonexistent/ckpt.json"), std::nullopt));
    CHECK_THROWS(make_governor("performance", table(), std::nullopt, std::nullopt));
}

TEST_CASE("learned governors") {
    const auto dir = std::filesystem::temp_directory_path();
    AgentConfig cfg;
    cfg.kind = AgentKind::Ztt;
    cfg.ztt_cooldown_probability = 1.0;
    Agent(cfg, table()).save(dir / "ztt_gov.json");
    cfg.kind = AgentKind::Sds;
    Agent(cfg, table()).save(dir / "sds_gov.json");

    CHECK_THROWS_AS(learned_governor(AgentKind::Sds, dir / "ztt_gov.json"), DomainError);

    auto ztt = make_governor("ztt", table(), dir / "ztt_gov.json", std::nullopt);
    auto sds = make_governor("sds", table(), dir / "sds_gov.json", std::nullopt);
    CHECK(ztt->decisions_per_frame() == 1);
    CHECK(sds->decisions_per_frame() == 2);

    const LatencyConstraint L(450);
    Observation rpn = obs(40, 2, 2);
    rpn.stage = Stage::AfterRpn;
    rpn.proposals = 300;
    CHECK(ztt->second(rpn, {1, 2}, L) == Action{1, 2});

    // Overheated with a fixed cool-down probability of one: always a strictly lower pair.
    for (int i = 0; i < 200; ++i) {
        const Action a = ztt->first(obs(85, 3, 2), L);
        CHECK(a.cpu_level <= 3);
        CHECK(a.gpu_level <= 2);
        CHECK_FALSE((a.cpu_level == 3 && a.gpu_level == 2));
    }
    std::filesystem::remove(dir / "ztt_gov.json");
    std::filesystem::remove(dir / "sds_gov.json");
}

TEST_CASE("governed frames stay inside the table") {
    DeviceProfile p = builtin_device_profile();
    auto dev = make_device(p, "kitti-like", std::nullopt, 450, 0, OverheadModel{}, 2);
    OndemandGovernor g(p.table);
    for (int i = 0; i < 300; ++i) {
        const auto t = run_governed_frame(*dev, g);
        CHECK(t.first.cpu_level < 4);
        CHECK(t.first.gpu_level < 4);
        CHECK(t.second == t.first);
    }
}
