#pragma once

#include "sds/agent.hpp"
#include "sds/core_model.hpp"
#include "sds/device_sim.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace sds {

/// A frequency policy driven once or twice per frame.
class Governor {
public:
    virtual ~Governor() = default;

    virtual std::string name() const = 0;
    /// Remote decisions per frame (0 for on-device heuristics); sets the injected overhead.
    virtual int decisions_per_frame() const = 0;
    virtual Action first(const Observation& obs, const LatencyConstraint& budget) = 0;
    /// Defaults to repeating the first action.
    virtual Action second(const Observation& obs, const Action& first, const LatencyConstraint& budget);
    /// Feedback after the frame completes.
    virtual void frame_done(const FrameTrace&) {}
};

class FixedGovernor final : public Governor {
public:
    FixedGovernor(Action levels, const FrequencyTable& table);

    std::string name() const override { return "fixed"; }
    int decisions_per_frame() const override { return 0; }
    Action first(const Observation&, const LatencyConstraint&) override { return levels_; }
    Action second(const Observation&, const Action&, const LatencyConstraint&) override { return levels_; }

private:
    Action levels_;
};

/// Utilization-threshold heuristic standing in for the stock kernel governors: above `up_threshold`
/// jump to the top level, otherwise step down. Acts at frame start only.
class OndemandGovernor final : public Governor {
public:
    explicit OndemandGovernor(const FrequencyTable& table, double up_threshold = 0.8, std::size_t down_step = 1);

    std::string name() const override { return "ondemand"; }
    int decisions_per_frame() const override { return 0; }
    Action first(const Observation& obs, const LatencyConstraint&) override;
    void frame_done(const FrameTrace& trace) override;

    /// The per-processor rule on its own.
    static std::size_t next_level(std::size_t current, double utilization, std::size_t levels, double up_threshold,
                                  std::size_t down_step);

    double cpu_utilization() const noexcept { return cpu_util_; }
    double gpu_utilization() const noexcept { return gpu_util_; }
    void set_utilization(double cpu, double gpu) { cpu_util_ = cpu; gpu_util_ = gpu; }

private:
    FrequencyTable table_;
    double up_threshold_;
    std::size_t down_step_;
    double cpu_util_ = 1.0;
    double gpu_util_ = 1.0;
};

/// Deploys a trained agent. The SDS agent decides at both points; the zTT-style agent decides at
/// frame start and repeats that pair after the RPN.
class LearnedGovernor final : public Governor {
public:
    explicit LearnedGovernor(Agent agent);

    std::string name() const override { return to_string(agent_.config().kind); }
    int decisions_per_frame() const override { return agent_.config().kind == AgentKind::Sds ? 2 : 1; }
    Action first(const Observation& obs, const LatencyConstraint& budget) override;
    Action second(const Observation& obs, const Action& first, const LatencyConstraint& budget) override;

    const Agent& agent() const noexcept { return agent_; }

private:
    Agent agent_;
};

/// Loads a checkpoint and checks it was trained as `kind`. Throws on a missing file.
std::unique_ptr<Governor> learned_governor(AgentKind kind, const std::filesystem::path& checkpoint);

/// fixed | ondemand | ztt | sds. Learned governors need a checkpoint; `fixed` defaults to the top levels.
std::unique_ptr<Governor> make_governor(const std::string& name, const FrequencyTable& table,
                                        const std::optional<std::filesystem::path>& checkpoint,
                                        std::optional<Action> fixed_levels = std::nullopt);

/// Drives one frame through `env` with `gov`.
FrameTrace run_governed_frame(DeviceEnvironment& env, Governor& gov);

}  // namespace sds
