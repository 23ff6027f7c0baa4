#include "sds/bench.hpp"
#include "sds/device_sim.hpp"

#include <doctest.h>

#include <cmath>

using namespace sds;

namespace {

ProcessorThermalParams params(double c, double r, double rc, double kappa, double idle) {
    return {c, r, rc, kappa, idle};
}

DeviceProfile noiseless_builtin() {
    DeviceProfile p = builtin_device_profile();
    p.latency.noise_sigma = 0.0;
    return p;
}

class ConstantWorkload final : public WorkloadSource {
public:
    explicit ConstantWorkload(long p) : p_(p) {}
    FrameWorkload next() override { return {id_++, p_}; }

private:
    long p_;
    long id_ = 0;
};

}  // namespace

TEST_CASE("power law") {
    const auto p = params(1, 1, 1, 2.0, 0.5);
    CHECK(power(1000.0, p) == doctest::Approx(2.5));
    CHECK(power(1e-6, p) == doctest::Approx(0.5));
    const double d1 = power(600.0, p) - 0.5;
    const double d2 = power(1200.0, p) - 0.5;
    CHECK(d2 / d1 == doctest::Approx(8.0));
}

TEST_CASE("thermal step") {
    const auto cpu = params(2.0, 10.0, 20.0, 1.0, 0.1);
    const auto gpu = params(3.0, 8.0, 20.0, 1.0, 0.1);
    DeviceSimState s;
    s.ambient_temp = 25.0;
    s.cpu_temp = 45.0;
    s.gpu_temp = 45.0;

    SUBCASE("equilibrium holds") {
        const auto next = step_thermal(s, 10.0, 20.0 / 10.0, 20.0 / 8.0, cpu, gpu);
        CHECK(next.cpu_temp == doctest::Approx(45.0));
        CHECK(next.gpu_temp == doctest::Approx(45.0));
        CHECK(next.sim_clock_ms == 10.0);
    }
    SUBCASE("pure cooling") {
        const auto next = step_thermal(s, 10.0, 0.0, 0.0, cpu, gpu);
        CHECK(next.cpu_temp < s.cpu_temp);
        CHECK(next.gpu_temp < s.gpu_temp);
    }
    SUBCASE("stability bound") {
        CHECK(max_stable_step_ms(cpu, gpu) == doctest::Approx(2.0 * 10.0 * 1000.0 / 4.0));
        CHECK_THROWS_AS(step_thermal(s, max_stable_step_ms(cpu, gpu) * 1.01, 0, 0, cpu, gpu), DomainError);
        CHECK_THROWS_AS(step_thermal(s, 0.0, 0, 0, cpu, gpu), DomainError);
    }
}

TEST_CASE("decoupled constant-power equilibrium") {
    const auto cpu = params(2.0, 10.0, 1e12, 1.0, 0.1);
    const auto gpu = params(4.0, 6.0, 1e12, 1.0, 0.1);
    DeviceSimState s;
    s.ambient_temp = 25.0;
    s.cpu_temp = s.gpu_temp = 25.0;
    const double tau_ms = 24.0 * 1000.0;  // slowest C·R
    for (double t = 0; t < 20.0 * tau_ms; t += 10.0) s = step_thermal(s, 10.0, 3.0, 5.0, cpu, gpu);
    CHECK(std::abs(s.cpu_temp - (25.0 + 3.0 * 10.0)) < 0.1);
    CHECK(std::abs(s.gpu_temp - (25.0 + 5.0 * 6.0)) < 0.1);
}

TEST_CASE("throttle hysteresis") {
    const ThermalConfig th{70, 80, 5};
    DeviceSimState s;
    s.cpu_temp = 81;
    s = check_throttle(s, th);
    CHECK(s.cpu_throttled);
    CHECK_FALSE(s.gpu_throttled);
    s.cpu_level = 3;
    CHECK(s.effective_cpu_level() == 0);
    s.cpu_temp = 77.5;
    s = check_throttle(s, th);
    CHECK(s.cpu_throttled);
    CHECK(check_throttle(s, th) == s);  // idempotent
    s.cpu_temp = 70;
    s = check_throttle(s, th);
    CHECK_FALSE(s.cpu_throttled);
    CHECK(s.effective_cpu_level() == 3);
}

TEST_CASE("cycle latency model") {
    LatencyModelParams lp;
    lp.stage1_cpu_gcycles = 40;
    lp.stage1_gpu_gcycles = 100;
    lp.stage2_base_cpu_gcycles = 5;
    lp.stage2_base_gpu_gcycles = 3;
    lp.stage2_per_proposal_cpu_gcycles = 0.02;
    lp.stage2_per_proposal_gpu_gcycles = 0.05;

    const auto zero = frame_latency({0, 0}, 1000, 500, 1000, 500, lp);
    CHECK(zero.stage1_ms == doctest::Approx(40.0 + 200.0));
    CHECK(zero.stage2_ms == doctest::Approx(5.0 + 6.0));

    const auto a = frame_latency({0, 100}, 1000, 500, 1000, 500, lp);
    const auto b = frame_latency({0, 200}, 1000, 500, 1000, 500, lp);
    const auto c = frame_latency({0, 300}, 1000, 500, 1000, 500, lp);
    CHECK(b.stage2_ms > a.stage2_ms);
    CHECK(c.stage2_ms - b.stage2_ms == doctest::Approx(b.stage2_ms - a.stage2_ms));

    const auto half = frame_latency({0, 300}, 500, 250, 500, 250, lp);
    CHECK(half.stage1_ms + half.stage2_ms == doctest::Approx(2.0 * (c.stage1_ms + c.stage2_ms)));

    const auto faster_cpu = frame_latency({0, 300}, 1100, 500, 1100, 500, lp);
    CHECK(faster_cpu.stage1_ms + faster_cpu.stage2_ms < c.stage1_ms + c.stage2_ms);

    lp.noise_sigma = 0.5;
    CHECK_THROWS_AS(lp.validate(), DomainError);
}

TEST_CASE("profile JSON round trip and field names") {
    const DeviceProfile p = builtin_device_profile();
    const auto j = profile_to_json(p);
    for (const char* key : {"cpu_levels_mhz", "gpu_levels_mhz", "stage1_cpu_gcycles", "stage1_gpu_gcycles",
                            "stage2_base_cpu_gcycles", "stage2_base_gpu_gcycles", "stage2_per_proposal_cpu_gcycles",
                            "stage2_per_proposal_gpu_gcycles", "noise_sigma", "ambient_c", "throttle_c",
                            "hysteresis_c"}) {
        CHECK_MESSAGE(j.contains(key), key);
    }
    for (const char* key :
         {"heat_capacity_j_per_c", "r_ambient_c_per_w", "r_couple_c_per_w", "kappa_w_per_ghz3", "idle_w"}) {
        CHECK(j.at("cpu").contains(key));
        CHECK(j.at("gpu").contains(key));
    }
    const DeviceProfile back = profile_from_json(j);
    CHECK(profile_to_json(back) == j);

    auto broken = j;
    broken.erase("noise_sigma");
    CHECK_THROWS(profile_from_json(broken));
}

TEST_CASE("noiseless frames are deterministic") {
    auto run = [] {
        SimulatedDevice dev(noiseless_builtin(), std::make_unique<ConstantWorkload>(150), LatencyConstraint(450),
                            OverheadModel{}, 1);
        std::vector<double> totals;
        for (int i = 0; i < 50; ++i) {
            totals.push_back(run_frame(dev, [](const Observation&) { return Action{3, 2}; },
                                       [](const Observation&) { return Action{2, 3}; })
                                 .total_ms);
        }
        return totals;
    };
    CHECK(run() == run());
}

TEST_CASE("cold start at the top levels runs at the calibrated minimum") {
    const DeviceProfile p = noiseless_builtin();
    SimulatedDevice dev(p, std::make_unique<ConstantWorkload>(150), LatencyConstraint(450), OverheadModel{}, 1);
    const Action top{3, 3};
    const auto trace = run_frame(dev, [&](const Observation&) { return top; }, [&](const Observation&) { return top; });
    const auto model = frame_latency({0, 150}, 1510, 625, 1510, 625, p.latency);
    // Only the frequency-switch dead time separates the two.
    CHECK(trace.total_ms == doctest::Approx(model.stage1_ms + model.stage2_ms + DeviceSimulator::kSwitchDeadTimeMs));
    CHECK(trace.throttle_events == 0);
}

TEST_CASE("sustained top levels overheat, throttle and slow frames down") {
    const DeviceProfile p = noiseless_builtin();
    SimulatedDevice dev(p, std::make_unique<ConstantWorkload>(150), LatencyConstraint(450), OverheadModel{}, 1);
    const Action top{3, 3};
    std::vector<FrameTrace> traces;
    long first_throttle = -1;
    for (long i = 0; i < 3000 && first_throttle < 0; ++i) {
        traces.push_back(
            run_frame(dev, [&](const Observation&) { return top; }, [&](const Observation&) { return top; }));
        if (traces.back().throttle_events > 0) first_throttle = i;
    }
    REQUIRE(first_throttle > 0);
    const double before = traces.front().total_ms;
    const auto next = run_frame(dev, [&](const Observation&) { return top; }, [&](const Observation&) { return top; });
    CHECK(next.total_ms > 2.0 * before);
    CHECK(std::max(next.max_cpu_temp, next.max_gpu_temp) <= p.thermal.throttle_c + 1.0);
}

TEST_CASE("idle cooling approaches ambient monotonically") {
    DeviceSimulator sim(noiseless_builtin(), 1);
    DeviceSimState hot = sim.state();
    hot.cpu_temp = 78;
    hot.gpu_temp = 79;
    sim.set_state(hot);
    std::vector<TempSample> samples;
    sim.idle(20000.0, &samples);
    REQUIRE(samples.size() > 100);
    for (std::size_t i = 1; i < samples.size(); ++i) {
        CHECK(std::max(samples[i].cpu_temp, samples[i].gpu_temp) <=
              std::max(samples[i - 1].cpu_temp, samples[i - 1].gpu_temp) + 1e-12);
        CHECK(samples[i].cpu_temp >= 25.0);
    }
}

TEST_CASE("overhead is injected as idle time per decision") {
    const DeviceProfile p = noiseless_builtin();
    OverheadModel sds;
    sds.decisions_per_frame = 2;
    CHECK(sds.per_frame_ms() == doctest::Approx(8.52));
    CHECK(sds.messages_per_frame() == 4);

    auto total = [&](int decisions) {
        OverheadModel o;
        o.decisions_per_frame = decisions;
        SimulatedDevice dev(p, std::make_unique<ConstantWorkload>(150), LatencyConstraint(450), o, 1);
        const auto t = run_frame(dev, [](const Observation&) { return Action{2, 2}; },
                                 [](const Observation&) { return Action{2, 2}; });
        return std::pair{t.total_ms, t.overhead_ms};
    };
    const auto [t0, o0] = total(0);
    const auto [t2, o2] = total(2);
    CHECK(o0 == 0.0);
    CHECK(o2 == doctest::Approx(8.52));
    CHECK(t2 - t0 == doctest::Approx(8.52));
}

TEST_CASE("observations report slack against the budget") {
    const DeviceProfile p = noiseless_builtin();
    SimulatedDevice dev(p, std::make_unique<ConstantWorkload>(150), LatencyConstraint(450), OverheadModel{}, 1);
    const auto start = dev.frame_start();
    CHECK(start.stage == Stage::FrameStart);
    CHECK(start.slack_ms == 450.0);
    const auto mid = dev.after_rpn({3, 3});
    CHECK(mid.stage == Stage::AfterRpn);
    CHECK(mid.proposals == 150);
    CHECK(mid.slack_ms < 450.0);
    CHECK_THROWS(dev.after_rpn({3, 3}));
    const auto trace = dev.finish_frame({3, 3});
    CHECK(trace.total_ms == doctest::Approx(trace.stage1_ms + trace.stage2_ms + trace.overhead_ms));
}
