#pragma once

// An enumerable two-decision MDP for checking the learner against value iteration.
//
// Two CPU levels; the GPU is pinned (its requested level has no effect and is always reported
// as 0), so the effective action grid is 2 x 1. The state is (stage, last CPU level); the CPU
// temperature is a deterministic function of the last level. Running fast while already hot is
// penalized, so the optimal policy depends on the state.

#include "sds/agent.hpp"

#include <array>
#include <cmath>

namespace tiny_mdp {

inline const sds::FrequencyTable& table() {
    static const sds::FrequencyTable t({1000.0, 2000.0}, {500.0, 1000.0});
    return t;
}

inline const sds::LatencyConstraint kBudget{400.0};

inline constexpr double kCoolTemp = 55.0;
inline constexpr double kHotTemp = 75.0;

// State index: stage * 2 + last CPU level.
inline constexpr int kStates = 4;

inline sds::Observation observation(int state) {
    sds::Observation o;
    const bool rpn = state >= 2;
    const std::size_t last = static_cast<std::size_t>(state % 2);
    o.stage = rpn ? sds::Stage::AfterRpn : sds::Stage::FrameStart;
    o.cpu_temp = last == 1 ? kHotTemp : kCoolTemp;
    o.gpu_temp = 50.0;
    o.cpu_level = last;
    o.gpu_level = 0;
    o.slack_ms = rpn ? (last == 1 ? 200.0 : 100.0) : 400.0;
    if (rpn) o.proposals = 120;
    return o;
}

inline double reward(int state, int cpu_level) {
    const bool rpn = state >= 2;
    const bool hot = state % 2 == 1;
    double r = cpu_level == 1 ? (rpn ? 1.2 : 1.0) : 0.3;
    if (hot && cpu_level == 1) r -= 1.5;
    return r;
}

inline int next_state(int state, int cpu_level) {
    const int next_stage = state >= 2 ? 0 : 1;
    return next_stage * 2 + cpu_level;
}

/// Q*(s, cpu) by value iteration on the continuing MDP.
inline std::array<std::array<double, 2>, kStates> value_iteration(double gamma, int sweeps = 5000) {
    std::array<std::array<double, 2>, kStates> q{};
    for (int it = 0; it < sweeps; ++it) {
        auto next = q;
        for (int s = 0; s < kStates; ++s) {
            for (int a = 0; a < 2; ++a) {
                const int s2 = next_state(s, a);
                next[s][a] = reward(s, a) + gamma * std::max(q[s2][0], q[s2][1]);
            }
        }
        q = next;
    }
    return q;
}

/// Every (state, action) pair, each GPU request included, pushed `copies` times.
inline void fill_replay(sds::DualReplayBuffer& replay, int copies) {
    for (int c = 0; c < copies; ++c) {
        for (int s = 0; s < kStates; ++s) {
            for (std::size_t cpu = 0; cpu < 2; ++cpu) {
                for (std::size_t gpu = 0; gpu < 2; ++gpu) {
                    const sds::Observation o = observation(s);
                    replay.push(sds::Transition(o, {cpu, gpu}, reward(s, static_cast<int>(cpu)),
                                                observation(next_state(s, static_cast<int>(cpu))),
                                                sds::parity_of(o.stage)));
                }
            }
        }
    }
}

inline sds::AgentConfig agent_config(double gamma, std::int64_t iterations) {
    sds::AgentConfig cfg;
    cfg.kind = sds::AgentKind::Sds;
    cfg.gamma = gamma;
    cfg.iterations = iterations;
    cfg.hidden = 32;
    cfg.batch_size = 64;
    cfg.warmup = 64;
    cfg.target_update_every = 50;
    cfg.base_lr = 0.003;
    cfg.seed = 3;
    return cfg;
}

struct Outcome {
    double max_q_error = 0.0;
    bool policy_matches = true;
};

/// Trains on uniformly replayed transitions, alternating parities, then compares with value iteration.
inline Outcome train_and_compare(double gamma, std::int64_t iterations) {
    sds::Agent agent(agent_config(gamma, iterations), table());
    fill_replay(agent.replay(), 40);
    for (std::int64_t i = 0; i < iterations; ++i) {
        agent.train_step(i % 2 == 0 ? sds::Parity::Even : sds::Parity::Odd, kBudget);
    }
    const auto q_star = value_iteration(gamma);
    Outcome out;
    for (int s = 0; s < kStates; ++s) {
        const Eigen::VectorXd q = agent.q_values(observation(s), kBudget);
        for (std::size_t cpu = 0; cpu < 2; ++cpu) {
            for (std::size_t gpu = 0; gpu < 2; ++gpu) {
                const auto idx = static_cast<Eigen::Index>(sds::action_to_index({cpu, gpu}, table()));
                out.max_q_error = std::max(out.max_q_error, std::abs(q(idx) - q_star[s][cpu]));
            }
        }
        const int best = q_star[s][1] > q_star[s][0] ? 1 : 0;
        const auto greedy = sds::index_to_action(sds::greedy_index(q), table());
        if (static_cast<int>(greedy.cpu_level) != best) out.policy_matches = false;
    }
    return out;
}

}  // namespace tiny_mdp
