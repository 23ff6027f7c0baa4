#pragma once

#include "sds/core_model.hpp"
#include "sds/workload.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace sds {

struct ProcessorThermalParams {
    double heat_capacity = 1.0;          // J/°C
    double resistance_to_ambient = 1.0;  // °C/W
    double coupling_resistance = 1.0;    // °C/W, to the other processor
    double kappa = 1.0;                  // W/GHz³
    double idle_power = 0.1;             // W

    void validate() const;
};

/// Work constants in GHz·ms: dividing by a frequency in GHz yields milliseconds.
struct LatencyModelParams {
    double stage1_cpu_gcycles = 0.0;
    double stage1_gpu_gcycles = 0.0;
    double stage2_base_cpu_gcycles = 0.0;
    double stage2_base_gpu_gcycles = 0.0;
    double stage2_per_proposal_cpu_gcycles = 0.0;
    double stage2_per_proposal_gpu_gcycles = 0.0;
    double noise_sigma = 0.0;

    void validate() const;
};

struct DeviceProfile {
    std::string name;
    FrequencyTable table;
    ProcessorThermalParams cpu;
    ProcessorThermalParams gpu;
    LatencyModelParams latency;
    double ambient_c = 25.0;
    ThermalConfig thermal;

    void validate() const;
};

/// JSON document with the fixed field names ("cpu_levels_mhz", "heat_capacity_j_per_c", ...).
/// Thermal parameters sit under "cpu" and "gpu" objects; latency and thermal limits at the top level.
DeviceProfile profile_from_json(const nlohmann::json& doc);
nlohmann::json profile_to_json(const DeviceProfile& profile);
DeviceProfile load_profile(const std::filesystem::path& path);
void save_profile(const std::filesystem::path& path, const DeviceProfile& profile);

struct DeviceSimState {
    double cpu_temp = 25.0;
    double gpu_temp = 25.0;
    double ambient_temp = 25.0;
    std::size_t cpu_level = 0;  // requested
    std::size_t gpu_level = 0;
    bool cpu_throttled = false;
    bool gpu_throttled = false;
    double sim_clock_ms = 0.0;

    std::size_t effective_cpu_level() const noexcept { return cpu_throttled ? 0 : cpu_level; }
    std::size_t effective_gpu_level() const noexcept { return gpu_throttled ? 0 : gpu_level; }

    bool operator==(const DeviceSimState&) const = default;
};

/// Device at rest at ambient temperature, lowest levels.
DeviceSimState cold_state(const DeviceProfile& profile);

/// kappa·(f/1000)³ + idle_power.
double power(double freq_mhz, const ProcessorThermalParams& params);

/// Largest forward-Euler step (ms) accepted for these parameters: min(C·R)/4.
double max_stable_step_ms(const ProcessorThermalParams& cpu, const ProcessorThermalParams& gpu);

/// One forward-Euler step of the two-node RC network. Throws DomainError when dt exceeds the stability bound.
DeviceSimState step_thermal(const DeviceSimState& state, double dt_ms, double cpu_power, double gpu_power,
                            const ProcessorThermalParams& cpu, const ProcessorThermalParams& gpu);

/// Throttles a processor above throttle_c; releases it below throttle_c − hysteresis_c.
DeviceSimState check_throttle(const DeviceSimState& state, const ThermalConfig& thermal);

struct StageWork {
    double cpu_gcycles = 0.0;
    double gpu_gcycles = 0.0;
};

StageWork stage1_work(const LatencyModelParams& params);
StageWork stage2_work(const LatencyModelParams& params, long proposals);

/// Milliseconds to retire `work` at the given clocks.
double stage_time_ms(const StageWork& work, double cpu_mhz, double gpu_mhz);

struct StageLatency {
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
};

/// Noiseless when `rng` is null or noise_sigma is zero; otherwise each stage gets an independent
/// log-normal factor with median 1.
StageLatency frame_latency(const FrameWorkload& workload, double cpu_mhz_first, double gpu_mhz_first,
                           double cpu_mhz_second, double gpu_mhz_second, const LatencyModelParams& params,
                           Rng* rng = nullptr);

/// Per-frame governor overhead injected into latency: each decision costs one observation message,
/// one model evaluation and one action message.
struct OverheadModel {
    double message_ms = 1.92;
    double decision_ms = 0.42;
    int decisions_per_frame = 0;

    double per_decision_ms() const noexcept { return 2.0 * message_ms + decision_ms; }
    double per_frame_ms() const noexcept { return decisions_per_frame * per_decision_ms(); }
    int messages_per_frame() const noexcept { return 2 * decisions_per_frame; }
};

struct TempSample {
    double clock_ms;
    double cpu_temp;
    double gpu_temp;
};

struct FrameTrace {
    long frame_id = 0;
    long proposals = 0;
    double stage1_ms = 0.0;
    double stage2_ms = 0.0;
    double overhead_ms = 0.0;
    double total_ms = 0.0;
    Action first;   // requested
    Action second;
    double cpu_temp = 0.0;  // at frame end
    double gpu_temp = 0.0;
    double max_cpu_temp = 0.0;
    double max_gpu_temp = 0.0;
    double cpu_busy_ms = 0.0;
    double gpu_busy_ms = 0.0;
    int throttle_events = 0;
    double ambient_c = 0.0;
    std::vector<TempSample> temps;
};

/// Step-wise physics of one device: apply a level pair, retire a stage of work in dt sub-steps,
/// throttle on the way. Deterministic for a fixed seed.
class DeviceSimulator {
public:
    static constexpr double kDefaultStepMs = 10.0;
    static constexpr double kSwitchDeadTimeMs = 0.05;

    DeviceSimulator(DeviceProfile profile, std::uint64_t seed, double dt_ms = kDefaultStepMs);

    const DeviceProfile& profile() const noexcept { return profile_; }
    const DeviceSimState& state() const noexcept { return state_; }
    void set_state(const DeviceSimState& s) { state_ = s; }
    void set_ambient(double ambient_c) { state_.ambient_temp = ambient_c; }
    double dt_ms() const noexcept { return dt_ms_; }

    /// Sets requested levels; returns the dead time spent if the effective levels changed.
    double apply(const Action& action);

    struct StageResult {
        double elapsed_ms = 0.0;
        double cpu_busy_ms = 0.0;
        double gpu_busy_ms = 0.0;
        int throttle_events = 0;
    };

    /// Retires `work` (scaled by a noise factor) at the current effective levels.
    StageResult run_stage(const StageWork& work, std::vector<TempSample>* samples);

    /// Passes time with processors idle (governor overhead, waiting on the network).
    StageResult idle(double ms, std::vector<TempSample>* samples);

    double noise_factor();

private:
    StageResult advance(double ms, double cpu_share, double gpu_share, std::vector<TempSample>* samples,
                        const StageWork* work);

    DeviceProfile profile_;
    DeviceSimState state_;
    Rng rng_;
    double dt_ms_;
};

/// The device seen from a governor: two observations and two actions per frame.
class DeviceEnvironment {
public:
    virtual ~DeviceEnvironment() = default;

    virtual const FrequencyTable& table() const = 0;
    virtual LatencyConstraint budget() const = 0;
    /// Observation at the start of the next frame.
    virtual Observation frame_start() = 0;
    /// Applies the first action, runs stage 1 and returns the post-RPN observation.
    virtual Observation after_rpn(const Action& first) = 0;
    /// Applies the second action and completes the frame.
    virtual FrameTrace finish_frame(const Action& second) = 0;
};

/// Source of per-frame workloads.
class WorkloadSource {
public:
    virtual ~WorkloadSource() = default;
    virtual FrameWorkload next() = 0;
};

class SampledWorkload final : public WorkloadSource {
public:
    SampledWorkload(DatasetProfile profile, std::uint64_t seed);
    FrameWorkload next() override;
    void set_profile(DatasetProfile profile) { profile_ = std::move(profile); }
    const DatasetProfile& profile() const noexcept { return profile_; }

private:
    DatasetProfile profile_;
    Rng rng_;
    long next_id_ = 0;
};

/// Replays a trace, wrapping around at the end.
class TraceWorkload final : public WorkloadSource {
public:
    explicit TraceWorkload(std::vector<FrameWorkload> frames);
    FrameWorkload next() override;

private:
    std::vector<FrameWorkload> frames_;
    std::size_t pos_ = 0;
};

/// A simulated device running the two-stage detector against a workload stream.
class SimulatedDevice final : public DeviceEnvironment {
public:
    SimulatedDevice(DeviceProfile profile, std::unique_ptr<WorkloadSource> workload, LatencyConstraint budget,
                    OverheadModel overhead, std::uint64_t seed);

    const FrequencyTable& table() const override { return sim_.profile().table; }
    LatencyConstraint budget() const override { return budget_; }
    Observation frame_start() override;
    Observation after_rpn(const Action& first) override;
    FrameTrace finish_frame(const Action& second) override;

    DeviceSimulator& simulator() noexcept { return sim_; }
    const DeviceSimulator& simulator() const noexcept { return sim_; }
    void set_budget(LatencyConstraint budget) { budget_ = budget; }
    void set_workload(std::unique_ptr<WorkloadSource> workload) { workload_ = std::move(workload); }
    WorkloadSource& workload() { return *workload_; }
    const OverheadModel& overhead() const noexcept { return overhead_; }

private:
    enum class Phase { Idle, Started, Stage1Done };

    DeviceSimulator sim_;
    std::unique_ptr<WorkloadSource> workload_;
    LatencyConstraint budget_;
    OverheadModel overhead_;
    Phase phase_ = Phase::Idle;
    FrameWorkload current_;
    FrameTrace trace_;
};

/// Drives one frame through `env` with a pair of callbacks. The second callback sees the
/// post-RPN observation.
FrameTrace run_frame(DeviceEnvironment& env, const std::function<Action(const Observation&)>& first,
                     const std::function<Action(const Observation&)>& second);

}  // namespace sds
