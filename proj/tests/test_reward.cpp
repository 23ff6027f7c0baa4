#include "sds/reward.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace sds;

namespace {

struct RewardCase {
    double slack_ms, sigma_ms, cpu_temp, gpu_temp, budget_ms, penalty_p, lambda;
    double time, temp, combined;
};

// Evaluated independently in double precision; threshold 70 °C.
const RewardCase kCases[] = {
#include "reward_cases.inc"
};

bool close(double got, double want) { return std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)); }

}  // namespace

TEST_CASE("reward table") {
    const ThermalConfig thermal;
    for (const auto& c : kCases) {
        const LatencyConstraint budget(c.budget_ms);
        const RewardConfig cfg{c.lambda, c.penalty_p, 10};
        CHECK(close(time_reward(c.slack_ms, c.sigma_ms, c.penalty_p, budget), c.time));
        CHECK(close(temp_reward(c.cpu_temp, c.gpu_temp, thermal.threshold_c, c.penalty_p), c.temp));
        CHECK(close(combined_reward(c.slack_ms, c.sigma_ms, c.cpu_temp, c.gpu_temp, cfg, thermal, budget), c.combined));
    }
}

TEST_CASE("documented reward examples") {
    const LatencyConstraint budget(450.0);
    CHECK(time_reward(45.0, 0.0, 2.0, budget) == doctest::Approx(1.09967).epsilon(1e-5));
    CHECK(time_reward(1e9, 0.0, 2.0, budget) == doctest::Approx(2.0));
    CHECK(time_reward(-112.5, 0.0, 2.0, budget) == -0.5);
    CHECK(temp_reward(50, 60, 70, 2) == 1.0);
    CHECK(temp_reward(75, 60, 70, 2) == -2.0);
    CHECK(temp_reward(70, 70, 70, 2) == 1.0);

    const ThermalConfig thermal;
    CHECK(combined_reward(45.0, 0.0, 50, 50, RewardConfig{}, thermal, budget) == doctest::Approx(2.09967).epsilon(1e-5));
    CHECK(combined_reward(-112.5, 0.0, 75, 75, RewardConfig{}, thermal, budget) == -2.5);
    const RewardConfig no_temp{0.0, 2.0, 10};
    CHECK(combined_reward(30.0, 4.0, 99, 99, no_temp, thermal, budget) == time_reward(30.0, 4.0, 2.0, budget));
}

TEST_CASE("time reward shape") {
    const LatencyConstraint budget(450.0);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> slack(-900.0, 900.0);
    std::uniform_real_distribution<double> sigma(0.0, 200.0);
    for (int i = 0; i < 2000; ++i) {
        const double a = slack(rng);
        const double b = a + std::abs(slack(rng)) * 0.01 + 1e-3;
        const double s = sigma(rng);
        if ((a > 0) == (b > 0)) CHECK(time_reward(b, s, 2.0, budget) > time_reward(a, s, 2.0, budget));
        CHECK(time_reward(a, s, 2.0, budget) <= 2.0);
        if (a > 0) CHECK(time_reward(a, s + 1.0, 2.0, budget) <= time_reward(a, s, 2.0, budget));
        const double t = temp_reward(sigma(rng) / 2.0, sigma(rng) / 2.0, 70.0, 2.0);
        CHECK((t == 1.0 || t == -2.0));
    }
}

TEST_CASE("slack window") {
    CHECK_THROWS_AS(SlackWindow(1), DomainError);
    SlackWindow w(3);
    CHECK(w.sigma() == 0.0);
    w.push(10.0);
    CHECK(w.sigma() == 0.0);
    w.push(20.0);
    CHECK(w.sigma() == doctest::Approx(5.0));
    w.push(30.0);
    w.push(40.0);  // evicts 10
    CHECK(w.size() == 3);
    CHECK(w.sigma() == doctest::Approx(std::sqrt(200.0 / 3.0)));

    SlackWindow same(10);
    for (int i = 0; i < 10; ++i) same.push(42.5);
    CHECK(same.sigma() == 0.0);
    const LatencyConstraint budget(450.0);
    CHECK(time_reward(42.5, same.sigma(), 2.0, budget) == std::tanh(42.5 / 450.0) + 1.0);
}
