#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

namespace sds {

/// Raised when a domain value violates its invariants.
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Ordered CPU/GPU operating points in MHz. Both lists strictly increasing, at least two levels each.
class FrequencyTable {
public:
    FrequencyTable(std::vector<double> cpu_levels_mhz, std::vector<double> gpu_levels_mhz);

    const std::vector<double>& cpu_levels() const noexcept { return cpu_levels_; }
    const std::vector<double>& gpu_levels() const noexcept { return gpu_levels_; }

    std::size_t cpu_count() const noexcept { return cpu_levels_.size(); }
    std::size_t gpu_count() const noexcept { return gpu_levels_.size(); }
    std::size_t action_count() const noexcept { return cpu_count() * gpu_count(); }

    double cpu_mhz(std::size_t level) const { return cpu_levels_.at(level); }
    double gpu_mhz(std::size_t level) const { return gpu_levels_.at(level); }

    bool operator==(const FrequencyTable&) const = default;

private:
    std::vector<double> cpu_levels_;
    std::vector<double> gpu_levels_;
};

/// Joint frequency decision: one level per processor.
struct Action {
    std::size_t cpu_level = 0;
    std::size_t gpu_level = 0;

    bool operator==(const Action&) const = default;
};

enum class Stage { FrameStart, AfterRpn };

/// What the governor sees at a decision point. Slack is raw milliseconds and may be negative.
struct Observation {
    Stage stage = Stage::FrameStart;
    double cpu_temp = 0.0;
    double gpu_temp = 0.0;
    std::size_t cpu_level = 0;
    std::size_t gpu_level = 0;
    double slack_ms = 0.0;
    std::optional<long> proposals;

    bool operator==(const Observation&) const = default;
};

/// Throws DomainError if proposals presence does not match the stage, temps are non-finite or
/// proposals are negative.
void validate(const Observation& obs);

struct LatencyConstraint {
    double budget_ms;

    explicit LatencyConstraint(double budget);
};

struct ThermalConfig {
    double threshold_c = 70.0;
    double throttle_c = 80.0;
    double hysteresis_c = 5.0;

    void validate() const;
};

struct RewardConfig {
    double lambda = 1.0;
    double penalty_p = 2.0;
    std::size_t window_n = 10;

    void validate() const;
};

/// Weights of the post-hoc objective: total latency plus alpha * squared deviation plus beta * misses.
struct ObjectiveWeights {
    double alpha = 0.01;
    double beta = 100.0;

    void validate() const;
};

enum class Parity { Even, Odd };

inline Parity parity_of(Stage s) noexcept { return s == Stage::FrameStart ? Parity::Even : Parity::Odd; }

/// A replay record. The constructor enforces that parity matches the stage of `state`.
class Transition {
public:
    Transition(Observation state, Action action, double reward, Observation next_state, Parity parity);

    const Observation& state() const noexcept { return state_; }
    const Action& action() const noexcept { return action_; }
    double reward() const noexcept { return reward_; }
    const Observation& next_state() const noexcept { return next_state_; }
    Parity parity() const noexcept { return parity_; }

private:
    Observation state_;
    Action action_;
    double reward_;
    Observation next_state_;
    Parity parity_;
};

std::size_t action_to_index(const Action& a, const FrequencyTable& table);
Action index_to_action(std::size_t index, const FrequencyTable& table);

inline constexpr std::size_t kFeatureCount = 7;
inline constexpr double kDefaultProposalScale = 1000.0;

using Features = Eigen::Matrix<double, kFeatureCount, 1>;

/// Scales an observation for the Q-network:
/// [stage, cpu_temp/100, gpu_temp/100, cpu_level/(M-1), gpu_level/(N-1), slack/L, proposals/p_max].
Features normalize_observation(const Observation& obs, const FrequencyTable& table,
                               const LatencyConstraint& constraint, double p_max = kDefaultProposalScale);

}  // namespace sds
