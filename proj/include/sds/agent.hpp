#pragma once

#include "sds/core_model.hpp"
#include "sds/device_sim.hpp"
#include "sds/reward.hpp"
#include "sds/slim_qnet.hpp"
#include "sds/workload.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sds {

using QNetwork = SlimmableMlp<double>;
using QOptimizer = AdamState<double>;

struct ExplorationConfig {
    double eps_start = 1.0;
    double eps_end = 0.05;
    std::int64_t eps_decay_steps = 5000;
    double eps_t_init = 1.0;
    std::int64_t cooldown_horizon = 200;

    void validate() const;
};

/// Linear decay from eps_start to eps_end over eps_decay_steps decisions.
double epsilon_at(const ExplorationConfig& cfg, std::int64_t decisions);

/// eps_t_init · cos(π/2 · min(k, K)/K): the cool-down probability after k cool-down triggers.
double cooldown_epsilon(const ExplorationConfig& cfg, std::int64_t triggers);

bool overheated(const Observation& obs, const ThermalConfig& thermal);

/// Uniform over level pairs that are component-wise no higher than the current pair and differ from
/// it; returns the current pair when it is already (0, 0).
Action random_lower_action(const Observation& obs, const FrequencyTable& table, Rng& rng);

/// Lowest index among the maxima.
std::size_t greedy_index(const Eigen::VectorXd& q_values);

struct Selection {
    Action action;
    bool cooled_down = false;
    bool explored = false;
};

/// When overheated, takes a random lower pair with probability `cooldown_probability`; otherwise
/// ε-greedy on `q_values`.
Selection select_action(const Eigen::VectorXd& q_values, const Observation& obs, const FrequencyTable& table,
                        const ThermalConfig& thermal, double epsilon, double cooldown_probability, Rng& rng);

/// As above with the cool-down probability taken from the decaying schedule; advances `cooldown_counter`
/// whenever the cool-down fires.
Selection select_action(const Eigen::VectorXd& q_values, const Observation& obs, const FrequencyTable& table,
                        const ThermalConfig& thermal, const ExplorationConfig& expl, double epsilon, Rng& rng,
                        std::int64_t& cooldown_counter);

/// Two bounded FIFO stores, one per decision parity.
class DualReplayBuffer {
public:
    explicit DualReplayBuffer(std::size_t capacity = 10000);

    void push(Transition t);
    const std::deque<Transition>& buffer(Parity p) const { return p == Parity::Even ? even_ : odd_; }
    std::size_t size(Parity p) const { return buffer(p).size(); }
    std::size_t capacity() const noexcept { return capacity_; }

    /// `count` uniform draws (with replacement) from the buffer of parity `p`.
    std::vector<const Transition*> sample(Parity p, std::size_t count, Rng& rng) const;

private:
    std::size_t capacity_;
    std::deque<Transition> even_;
    std::deque<Transition> odd_;
};

/// Stores <s_2i, a_2i, r_2i, s_2i+1> as even and <s_2i+1, a_2i+1, r_2i+1, s_2i+2> as odd.
/// Throws DomainError when a state's stage is inconsistent with its slot.
void push_frame(DualReplayBuffer& buffers, const Observation& s0, const Action& a0, double r0, const Observation& s1,
                const Action& a1, double r1, const Observation& s2);

/// Which agent design a network serves: the two-decision slimmable agent, or the single-decision
/// frame-start agent with a 6-feature full-width network.
enum class AgentKind { Sds, Ztt };

std::string to_string(AgentKind kind);
AgentKind agent_kind_from_string(const std::string& name);

MlpShape network_shape(AgentKind kind, const FrequencyTable& table, Eigen::Index hidden = 128,
                       double narrow_ratio = 0.75);

struct QInput {
    Eigen::VectorXd features;
    Width width;
};

/// Network input and evaluation width for an observation. Sds: Narrow at frame start, Full after the RPN.
QInput q_input(AgentKind kind, const Observation& obs, const FrequencyTable& table,
               const LatencyConstraint& constraint, double p_max);

/// r + γ · max_a Q_target(s'), evaluated at the width matching the next state's stage.
double td_target(const Transition& t, const QNetwork& target, double gamma, AgentKind kind,
                 const FrequencyTable& table, const LatencyConstraint& constraint, double p_max);

struct AgentConfig {
    AgentKind kind = AgentKind::Sds;
    std::int64_t iterations = 10000;
    std::int64_t max_frames = 12000;
    std::size_t batch_size = 64;
    std::size_t warmup = 500;
    std::size_t buffer_capacity = 10000;
    std::int64_t target_update_every = 200;
    double gamma = 0.9;
    double p_max = kDefaultProposalScale;
    Eigen::Index hidden = 128;
    double narrow_ratio = 0.75;
    double base_lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    /// Fixed cool-down probability of the single-decision baseline.
    double ztt_cooldown_probability = 1.0;
    ExplorationConfig exploration;
    RewardConfig reward;
    ThermalConfig thermal;
    std::uint64_t seed = 1;

    void validate() const;
};

nlohmann::json to_json(const AgentConfig& cfg);
AgentConfig agent_config_from_json(const nlohmann::json& j, AgentConfig base = {});

/// Learner state: online and target networks, optimizer, replay, counters.
class Agent {
public:
    Agent(AgentConfig cfg, FrequencyTable table);

    const AgentConfig& config() const noexcept { return cfg_; }
    const FrequencyTable& table() const noexcept { return table_; }
    QNetwork& network() noexcept { return net_; }
    const QNetwork& network() const noexcept { return net_; }
    const QNetwork& target_network() const noexcept { return target_; }
    const QOptimizer& optimizer() const noexcept { return opt_; }
    const DualReplayBuffer& replay() const noexcept { return replay_; }
    DualReplayBuffer& replay() noexcept { return replay_; }

    std::int64_t iterations() const noexcept { return iterations_; }
    std::int64_t decisions() const noexcept { return decisions_; }
    std::int64_t cooldown_counter() const noexcept { return cooldown_counter_; }

    double epsilon() const { return epsilon_at(cfg_.exploration, decisions_); }
    double cooldown_probability() const;

    Eigen::VectorXd q_values(const Observation& obs, const LatencyConstraint& constraint) const;

    /// Exploring action (training). Counts a decision.
    Selection explore(const Observation& obs, const LatencyConstraint& constraint);
    /// Deployment action: greedy apart from the cool-down rule.
    Selection exploit(const Observation& obs, const LatencyConstraint& constraint);

    /// One gradient step on a batch from the `parity` buffer; no-op (nullopt) below warmup or batch size,
    /// or once the iteration budget is spent. Returns the TD loss before the step.
    std::optional<double> train_step(Parity parity, const LatencyConstraint& constraint);

    /// Builds the regression batch a train step would use.
    TdBatch<double> make_batch(const std::vector<const Transition*>& sample, const LatencyConstraint& constraint) const;

    void save(const std::filesystem::path& path) const;
    static Agent load(const std::filesystem::path& path);
    nlohmann::json to_checkpoint() const;
    static Agent from_checkpoint(const nlohmann::json& doc);

private:
    Selection select(const Observation& obs, const LatencyConstraint& constraint, double epsilon);

    AgentConfig cfg_;
    FrequencyTable table_;
    QNetwork net_;
    QNetwork target_;
    QOptimizer opt_;
    DualReplayBuffer replay_;
    Rng rng_;
    std::int64_t iterations_ = 0;
    std::int64_t decisions_ = 0;
    std::int64_t cooldown_counter_ = 0;
};

/// Column order of the training log and (with ambient_c appended) the evaluation CSV.
inline constexpr const char* kTrainingLogHeader =
    "frame,stage1_ms,stage2_ms,total_ms,proposals,cpu_temp,gpu_temp,cpu_level_a,gpu_level_a,cpu_level_b,"
    "gpu_level_b,reward_even,reward_odd,eps,eps_t";

struct FrameLogRow {
    long frame = 0;
    FrameTrace trace;
    double reward_even = 0.0;
    double reward_odd = 0.0;
    double eps = 0.0;
    double eps_t = 0.0;
};

/// One CSV line (no newline) in the training-log column order, fixed precision.
std::string format_log_row(const FrameLogRow& row);

class EnvironmentClosed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The environment finished its episode in an orderly way; training stops without aborting.
class EnvironmentEnded : public EnvironmentClosed {
public:
    using EnvironmentClosed::EnvironmentClosed;
};

struct TrainingSummary {
    std::int64_t frames = 0;
    std::int64_t iterations = 0;
    std::vector<double> frame_rewards;  // reward_even + reward_odd per frame
    bool aborted = false;
    std::string abort_reason;
};

/// Runs frames against `env`, pushing transitions and training until the iteration budget or the
/// frame limit is reached. Writes one log row per frame to `log` when given. If the environment
/// reports a disconnect, the agent is checkpointed to `abort_checkpoint` (when set) and training stops.
/// An orderly end of the environment (EnvironmentEnded) just stops training.
TrainingSummary train(Agent& agent, DeviceEnvironment& env, std::ostream* log,
                      const std::optional<std::filesystem::path>& abort_checkpoint = std::nullopt);

/// Rewards for one completed frame, with the slack window already holding this frame's slack.
struct FrameRewards {
    double even;
    double odd;
};

FrameRewards frame_rewards(const FrameTrace& trace, const Observation& after_rpn, const Observation& next_start,
                           const SlackWindow& window, const RewardConfig& reward, const ThermalConfig& thermal,
                           const LatencyConstraint& constraint);

}  // namespace sds
