#include "sds/governors.hpp"

#include <algorithm>

namespace sds {

Action Governor::second(const Observation&, const Action& first, const LatencyConstraint&) { return first; }

FixedGovernor::FixedGovernor(Action levels, const FrequencyTable& table) : levels_(levels) {
    action_to_index(levels_, table);
}

OndemandGovernor::OndemandGovernor(const FrequencyTable& table, double up_threshold, std::size_t down_step)
    : table_(table), up_threshold_(up_threshold), down_step_(down_step) {
    if (!(up_threshold > 0.0 && up_threshold <= 1.0)) throw DomainError("up_threshold must lie in (0, 1]");
}

std::size_t OndemandGovernor::next_level(std::size_t current, double utilization, std::size_t levels,
                                         double up_threshold, std::size_t down_step) {
    if (utilization > up_threshold) return levels - 1;
    current = std::min(current, levels - 1);
    return current > down_step ? current - down_step : 0;
}

Action OndemandGovernor::first(const Observation& obs, const LatencyConstraint&) {
    return {next_level(obs.cpu_level, cpu_util_, table_.cpu_count(), up_threshold_, down_step_),
            next_level(obs.gpu_level, gpu_util_, table_.gpu_count(), up_threshold_, down_step_)};
}

void OndemandGovernor::frame_done(const FrameTrace& trace) {
    // Busy fraction of the last frame interval at the clocks that were actually running.
    if (trace.total_ms <= 0.0) return;
    cpu_util_ = std::min(1.0, trace.cpu_busy_ms / trace.total_ms);
    gpu_util_ = std::min(1.0, trace.gpu_busy_ms / trace.total_ms);
}

LearnedGovernor::LearnedGovernor(Agent agent) : agent_(std::move(agent)) {}

Action LearnedGovernor::first(const Observation& obs, const LatencyConstraint& budget) {
    return agent_.exploit(obs, budget).action;
}

Action LearnedGovernor::second(const Observation& obs, const Action& first, const LatencyConstraint& budget) {
    if (agent_.config().kind == AgentKind::Ztt) return first;
    return agent_.exploit(obs, budget).action;
}

std::unique_ptr<Governor> learned_governor(AgentKind kind, const std::filesystem::path& checkpoint) {
    if (!std::filesystem::exists(checkpoint)) {
        throw std::runtime_error("checkpoint not found: " + checkpoint.string());
    }
    Agent agent = Agent::load(checkpoint);
    if (agent.config().kind != kind) {
        throw DomainError("checkpoint was trained for '" + to_string(agent.config().kind) + "', not '" +
                          to_string(kind) + "'");
    }
    return std::make_unique<LearnedGovernor>(std::move(agent));
}

std::unique_ptr<Governor> make_governor(const std::string& name, const FrequencyTable& table,
                                        const std::optional<std::filesystem::path>& checkpoint,
                                        std::optional<Action> fixed_levels) {
    if (name == "fixed") {
        return std::make_unique<FixedGovernor>(
            fixed_levels.value_or(Action{table.cpu_count() - 1, table.gpu_count() - 1}), table);
    }
    if (name == "ondemand") return std::make_unique<OndemandGovernor>(table);
    if (name == "sds" || name == "ztt") {
        if (!checkpoint) throw DomainError("governor '" + name + "' needs a checkpoint");
        return learned_governor(agent_kind_from_string(name), *checkpoint);
    }
    throw DomainError("unknown governor: " + name);
}

FrameTrace run_governed_frame(DeviceEnvironment& env, Governor& gov) {
    const LatencyConstraint budget = env.budget();
    const Observation start = env.frame_start();
    const Action a = gov.first(start, budget);
    const Observation mid = env.after_rpn(a);
    const Action b = gov.second(mid, a, budget);
    FrameTrace trace = env.finish_frame(b);
    gov.frame_done(trace);
    return trace;
}

}  // namespace sds
