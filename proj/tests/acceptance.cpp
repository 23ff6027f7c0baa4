// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "sds/bench.hpp"
#include "sds/protocol.hpp"
#include "sds/reward.hpp"
#include "sds/slim_qnet.hpp"

#include "tiny_mdp.hpp"

#include <fmt/core.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <thread>

using namespace sds;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct RewardCase {
    double slack_ms, sigma_ms, cpu_temp, gpu_temp, budget_ms, penalty_p, lambda;
    double time, temp, combined;
};

const RewardCase kRewardCases[] = {
#include "reward_cases.inc"
};

double rel_err(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

using Net = SlimmableMlp<double>;

MlpShape shape_with(Eigen::Index outputs) {
    MlpShape s;
    s.outputs = outputs;
    return s;
}

Net random_net(const MlpShape& s, std::uint64_t seed) {
    Net net = kaiming_uniform<double>(s, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> n(0.0, 0.1);
    for (auto& b : net.biases) {
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = n(rng);
    }
    return net;
}

Net masked_to_narrow(const Net& net) {
    Net out = net;
    for (std::size_t l = 0; l < kLayers; ++l) {
        for (Eigen::Index r = 0; r < out.weights[l].rows(); ++r) {
            for (Eigen::Index c = 0; c < out.weights[l].cols(); ++c) {
                if (!is_active(out.shape, l, r, c, Width::Narrow)) out.weights[l](r, c) = 0.0;
            }
            if (!is_active(out.shape, l, r, -1, Width::Narrow)) out.biases[l](r) = 0.0;
        }
    }
    return out;
}

TdBatch<double> random_batch(const MlpShape& s, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_int_distribution<Eigen::Index> a(0, s.outputs - 1);
    TdBatch<double> b;
    b.inputs = Net::Matrix::NullaryExpr(s.inputs, size, [&] { return u(rng); });
    b.targets = Net::Vector::NullaryExpr(size, [&] { return u(rng); });
    for (int i = 0; i < size; ++i) b.actions.push_back(a(rng));
    return b;
}

Verdict reward_exactness() {
    const ThermalConfig thermal;
    double worst = 0.0;
    for (const auto& c : kRewardCases) {
        const LatencyConstraint budget(c.budget_ms);
        const RewardConfig cfg{c.lambda, c.penalty_p, 10};
        worst = std::max(worst, rel_err(time_reward(c.slack_ms, c.sigma_ms, c.penalty_p, budget), c.time));
        worst = std::max(worst, rel_err(temp_reward(c.cpu_temp, c.gpu_temp, thermal.threshold_c, c.penalty_p), c.temp));
        worst = std::max(worst, rel_err(combined_reward(c.slack_ms, c.sigma_ms, c.cpu_temp, c.gpu_temp, cfg, thermal,
                                                        budget),
                                        c.combined));
    }
    const std::size_t n = std::size(kRewardCases);
    return {n == 50 && worst <= 1e-9, fmt::format("{} cases, worst relative error {:.2e}", n, worst)};
}

Verdict slimming() {
    const MlpShape s = shape_with(16);
    int mismatches = 0;
    for (std::uint64_t draw = 0; draw < 1000; ++draw) {
        const Net net = random_net(s, draw);
        Eigen::MatrixXd x = Eigen::MatrixXd::Random(7, 4);
        const Eigen::MatrixXd narrow = forward(net, x, Width::Narrow);
        x.row(6).setZero();
        if (narrow != forward(masked_to_narrow(net), x, Width::Full)) ++mismatches;
    }

    Net net = random_net(s, 4242);
    auto opt = AdamState<double>::for_network(net, 1000);
    const auto full_only = [&](std::size_t l, Eigen::Index r, Eigen::Index c) {
        return !is_active(s, l, r, c, Width::Narrow);
    };
    const auto before = checksum(net, full_only);
    for (int i = 0; i < 1000; ++i) {
        const auto lg = backward(net, random_batch(s, 16, 10000 + static_cast<std::uint64_t>(i)), Width::Narrow);
        adam_step(net, lg.gradient, opt, Width::Narrow);
    }
    const bool unchanged = checksum(net, full_only) == before;
    return {mismatches == 0 && unchanged,
            fmt::format("{} of 1000 draws differ, full-only checksum {}", mismatches,
                        unchanged ? "unchanged" : "CHANGED")};
}

Verdict gradient_oracle() {
    const MlpShape s = shape_with(16);
    const Net net = random_net(s, 31);
    const auto batch = random_batch(s, 16, 32);
    std::mt19937_64 rng(33);
    double worst = 0.0;
    for (Width w : {Width::Narrow, Width::Full}) {
        const auto lg = backward(net, batch, w);
        // Sample among parameters the width actually uses; inactive ones have an exact zero gradient.
        std::vector<std::size_t> active;
        for (std::size_t k = 0; k < net.parameter_count(); ++k) {
            if (lg.gradient.flat(k) != 0.0) active.push_back(k);
        }
        std::uniform_int_distribution<std::size_t> pick(0, active.size() - 1);
        for (int i = 0; i < 100; ++i) {
            const std::size_t k = active[pick(rng)];
            Net plus = net, minus = net;
            const double h = 1e-5;
            plus.flat(k) += h;
            minus.flat(k) -= h;
            const double fd = (td_loss(plus, batch, w) - td_loss(minus, batch, w)) / (2.0 * h);
            const double g = lg.gradient.flat(k);
            worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8}));
        }
    }
    return {worst < 1e-4, fmt::format("200 parameters, worst relative error {:.2e}", worst)};
}

Verdict dqn_oracle() {
    const auto outcome = tiny_mdp::train_and_compare(0.9, 6000);
    return {outcome.policy_matches && outcome.max_q_error < 1e-2,
            fmt::format("policy {}, max |Q - Q*| = {:.2e}", outcome.policy_matches ? "optimal" : "SUBOPTIMAL",
                        outcome.max_q_error)};
}

Verdict thermal_oracle() {
    const ProcessorThermalParams cpu{2.0, 10.0, 1e12, 1.0, 0.1};
    const ProcessorThermalParams gpu{4.0, 6.0, 1e12, 1.0, 0.1};
    DeviceSimState s;
    s.ambient_temp = 25.0;
    s.cpu_temp = s.gpu_temp = 25.0;
    for (double t = 0; t < 20.0 * 24000.0; t += 10.0) s = step_thermal(s, 10.0, 3.0, 5.0, cpu, gpu);
    const double err = std::max(std::abs(s.cpu_temp - 55.0), std::abs(s.gpu_temp - 55.0));

    const DeviceProfile p = builtin_device_profile();
    DeviceSimState hot;
    hot.ambient_temp = 25.0;
    hot.cpu_temp = 85.0;
    hot.gpu_temp = 60.0;
    bool monotone = true;
    for (int i = 0; i < 50000; ++i) {
        const auto next = step_thermal(hot, 10.0, 0.0, 0.0, p.cpu, p.gpu);
        if (next.cpu_temp > hot.cpu_temp + 1e-12 || next.gpu_temp > hot.gpu_temp + 1e-12) monotone = false;
        if (next.cpu_temp < 25.0 - 1e-9 || next.gpu_temp < 25.0 - 1e-9) monotone = false;
        hot = next;
    }
    return {err < 0.1 && monotone,
            fmt::format("equilibrium error {:.3f} C, zero-power cooling {}", err, monotone ? "monotone" : "NOT monotone")};
}

Verdict calibration() {
    const DeviceProfile p = builtin_device_profile("jetson-fasterrcnn-kitti");
    const CalibrationTargets t;
    const auto c = verify_calibration(p.table, p.latency, dataset_profile("kitti-like"), t);
    return {c.passed, fmt::format("mean {:.2f} ms, stage-1 share {:.4f}, stage-2 spread {:.2f} ms", c.mean_ms,
                                  c.stage1_share, c.stage2_spread_ms)};
}

Verdict cooldown_schedule() {
    const ExplorationConfig cfg;
    bool ok = cooldown_epsilon(cfg, 0) == cfg.eps_t_init && cooldown_epsilon(cfg, cfg.cooldown_horizon) == 0.0;
    for (std::int64_t k = 1; k <= 3 * cfg.cooldown_horizon; ++k) {
        if (cooldown_epsilon(cfg, k) > cooldown_epsilon(cfg, k - 1)) ok = false;
    }

    const DeviceProfile p = builtin_device_profile();
    const ThermalConfig thermal;
    Rng rng(17);
    long raised = 0, cooled = 0;
    const Eigen::VectorXd q = Eigen::VectorXd::Random(16);
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t g = 0; g < 4; ++g) {
            Observation o;
            o.cpu_temp = 82.0;
            o.gpu_temp = 75.0;
            o.cpu_level = c;
            o.gpu_level = g;
            o.slack_ms = 450.0;
            std::int64_t counter = 0;
            for (int i = 0; i < 2000; ++i) {
                const auto a = random_lower_action(o, p.table, rng);
                raised += a.cpu_level > c || a.gpu_level > g;
                counter = 0;
                const auto sel = select_action(q, o, p.table, thermal, cfg, 0.0, rng, counter);
                if (sel.cooled_down) {
                    ++cooled;
                    raised += sel.action.cpu_level > c || sel.action.gpu_level > g;
                }
            }
        }
    }
    return {ok && raised == 0 && cooled > 0,
            fmt::format("schedule {}, {} cool-down actions raised a level", ok ? "ok" : "BROKEN", raised)};
}

protocol::Message random_message(std::mt19937_64& rng) {
    using namespace protocol;
    std::uniform_real_distribution<double> temp(-40.0, 130.0);
    std::uniform_real_distribution<double> ms(-5000.0, 5000.0);
    std::uniform_int_distribution<long> count(0, 100000);
    std::uniform_int_distribution<std::size_t> level(0, 63);
    auto done = [&] { return FrameDone{ms(rng), ms(rng), ms(rng), count(rng), temp(rng), temp(rng)}; };
    switch (rng() % 5) {
        case 0:
            return Hello{fmt::format("device-{}-é", rng() % 1000)};
        case 1: {
            Obs o;
            o.observation.stage = rng() % 2 ? Stage::FrameStart : Stage::AfterRpn;
            o.observation.cpu_temp = temp(rng);
            o.observation.gpu_temp = temp(rng);
            o.observation.cpu_level = level(rng);
            o.observation.gpu_level = level(rng);
            o.observation.slack_ms = ms(rng);
            if (o.observation.stage == Stage::AfterRpn) o.observation.proposals = count(rng);
            if (rng() % 2) o.frame_done = done();
            return o;
        }
        case 2:
            return Act{level(rng), level(rng)};
        case 3:
            return done();
        default:
            return Bye{};
    }
}

Verdict protocol_checks() {
    using namespace protocol;
    std::mt19937_64 rng(8);
    int round_trip_failures = 0;
    for (int i = 0; i < 10000; ++i) {
        const Message m = random_message(rng);
        if (!(decode(encode(m)) == m)) ++round_trip_failures;
    }

    // Legal traces of 1..3 frames with and without a trailing FrameDone, every adjacent swap.
    int swaps = 0, accepted_swaps = 0;
    for (int frames = 1; frames <= 3; ++frames) {
        for (int mask = 0; mask < (1 << frames); ++mask) {
            std::vector<Token> trace{Token::Hello};
            for (int f = 0; f < frames; ++f) {
                trace.insert(trace.end(), {Token::ObsStart, Token::Act, Token::ObsRpn, Token::Act});
                if (mask & (1 << f)) trace.push_back(Token::FrameDone);
            }
            trace.push_back(Token::Bye);
            if (!legal_trace(trace)) ++accepted_swaps;  // the base trace itself must be legal
            for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
                if (trace[i] == trace[i + 1]) continue;
                auto swapped = trace;
                std::swap(swapped[i], swapped[i + 1]);
                ++swaps;
                if (legal_trace(swapped)) ++accepted_swaps;
            }
        }
    }

    // One live session: messages per frame on the wire and the injected overhead.
    DeviceProfile profile = builtin_device_profile();
    profile.latency.noise_sigma = 0.0;
    auto [device_end, agent_end] = LoopbackChannel::pair();
    OverheadModel overhead;
    auto dev = make_device(profile, "kitti-like", std::nullopt, 450, 2, overhead, 5);
    const long frames = 10;
    std::thread device([&, d = device_end.get()] { serve_device(*d, *dev, profile.name, frames); });
    FixedGovernor gov({2, 2}, profile.table);
    serve_agent(*agent_end, gov, LatencyConstraint(450));
    device.join();
    long obs = 0, acts = 0;
    for (const auto& f : device_end->sent_frames()) obs += std::holds_alternative<Obs>(decode(f));
    for (const auto& f : agent_end->sent_frames()) acts += std::holds_alternative<Act>(decode(f));
    const double per_frame = static_cast<double>(obs + acts) / frames;

    overhead.decisions_per_frame = 2;
    auto probe = make_device(profile, "kitti-like", std::nullopt, 450, 2, OverheadModel{}, 5);
    const auto trace =
        run_frame(*probe, [](const Observation&) { return Action{1, 1}; }, [](const Observation&) { return Action{1, 1}; });
    const bool overhead_ok = std::abs(overhead.per_frame_ms() - 8.52) < 1e-12 && std::abs(trace.overhead_ms - 8.52) < 1e-9 &&
                             overhead.messages_per_frame() == 4;

    return {round_trip_failures == 0 && accepted_swaps == 0 && per_frame == 4.0 && overhead_ok,
            fmt::format("{} round-trip failures, {} of {} transpositions accepted, {:.1f} messages/frame, "
                        "overhead {:.2f} ms",
                        round_trip_failures, accepted_swaps, swaps, per_frame, trace.overhead_ms)};
}

Agent train_agent(AgentKind kind, const DeviceProfile& profile, std::uint64_t seed, std::ostream* log,
                  std::int64_t iterations) {
    AgentConfig cfg;
    cfg.kind = kind;
    cfg.iterations = iterations;
    cfg.seed = seed;
    Agent agent(cfg, profile.table);
    auto dev = make_device(profile, "kitti-like", std::nullopt, default_budget_ms("kitti-like"),
                           kind == AgentKind::Sds ? 2 : 1, OverheadModel{}, seed);
    train(agent, *dev, log);
    return agent;
}

Verdict end_to_end() {
    const DeviceProfile profile = builtin_device_profile();
    EvalConfig cfg;
    cfg.frames = 3000;

    LearnedGovernor sds(train_agent(AgentKind::Sds, profile, 1, nullptr, 10000));
    LearnedGovernor ztt(train_agent(AgentKind::Ztt, profile, 1, nullptr, 10000));
    OndemandGovernor ondemand(profile.table);

    const auto r_sds = run_eval(sds, profile, {}, cfg);
    const auto r_ztt = run_eval(ztt, profile, {}, cfg);
    const auto r_od = run_eval(ondemand, profile, {}, cfg);

    const double limit = profile.thermal.throttle_c + 1.0;
    long hot_frames = 0;
    for (const auto& t : r_sds.traces) hot_frames += std::max(t.max_cpu_temp, t.max_gpu_temp) > limit;

    const auto& s = r_sds.metrics;
    const auto& o = r_od.metrics;
    const auto& z = r_ztt.metrics;
    const bool ok = s.latency_std_ms <= 0.85 * o.latency_std_ms && s.satisfaction_rate >= o.satisfaction_rate + 0.10 &&
                    hot_frames == 0 && s.latency_std_ms <= 0.95 * z.latency_std_ms;
    return {ok, fmt::format("sigma sds {:.1f} / ondemand {:.1f} / ztt {:.1f} ms, R_L sds {:.3f} / ondemand {:.3f}, "
                            "{} frames above {:.0f} C",
                            s.latency_std_ms, o.latency_std_ms, z.latency_std_ms, s.satisfaction_rate,
                            o.satisfaction_rate, hot_frames, limit)};
}

Verdict determinism() {
    DeviceProfile profile = builtin_device_profile();
    profile.latency.noise_sigma = 0.0;
    auto run = [&] {
        std::ostringstream log;
        LearnedGovernor gov(train_agent(AgentKind::Sds, profile, 21, &log, 3000));
        EvalConfig cfg;
        cfg.frames = 500;
        cfg.seed = 21;
        return std::pair{log.str(), eval_csv(run_eval(gov, profile, {}, cfg))};
    };
    const auto a = run();
    const auto b = run();
    return {a.first == b.first && a.second == b.second,
            fmt::format("training log {} ({} bytes), eval CSV {} ({} bytes)", a.first == b.first ? "identical" : "DIFFERS",
                        a.first.size(), a.second == b.second ? "identical" : "DIFFERS", a.second.size())};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Verdict()> run;
    };
    const Criterion criteria[] = {
        {1, "reward exactness", 1, reward_exactness},
        {2, "slimming correctness", 30, slimming},
        {3, "gradient oracle", 30, gradient_oracle},
        {4, "DQN oracle on the tiny MDP", 120, dqn_oracle},
        {5, "thermal oracle", 5, thermal_oracle},
        {6, "calibration", 60, calibration},
        {7, "cool-down schedule", 5, cooldown_schedule},
        {8, "protocol", 30, protocol_checks},
        {9, "end-to-end directional claim", 900, end_to_end},
        {10, "determinism", 300, determinism},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.budget_s) {
            v.pass = false;
            v.detail += fmt::format(" [over the {:.0f} s budget]", c.budget_s);
        }
        failures += !v.pass;
        fmt::print("{} criterion {:2d} {} ({:.2f} s): {}\n", v.pass ? "PASS" : "FAIL", c.id, c.name, secs, v.detail);
        std::fflush(stdout);
    }
    fmt::print("{} of {} criteria passed\n", 10 - failures, 10);
    return failures == 0 ? 0 : 1;
}
