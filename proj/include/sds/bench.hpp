#pragma once

#include "sds/agent.hpp"
#include "sds/core_model.hpp"
#include "sds/device_sim.hpp"
#include "sds/governors.hpp"
#include "sds/workload.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sds {

struct Metrics {
    std::size_t frames = 0;
    double mean_latency_ms = 0.0;
    double latency_std_ms = 0.0;
    double satisfaction_rate = 0.0;
    double mean_cpu_temp = 0.0;
    double mean_gpu_temp = 0.0;
    double max_cpu_temp = 0.0;
    double max_gpu_temp = 0.0;
    int throttle_event_count = 0;
    double objective_value = 0.0;
    // Raw components of the objective, reported so the weights never hide the result.
    double objective_latency_sum = 0.0;
    double objective_variance_term = 0.0;
    std::size_t objective_miss_count = 0;
};

/// Mean, population std-dev, strict satisfaction rate (l < L) and
/// Σ l_i + α(l_i − l̄)² + β·[l_i > L]. Throws on empty input.
Metrics compute_metrics(std::span<const FrameTrace> traces, const LatencyConstraint& budget,
                        const ObjectiveWeights& weights);
Metrics compute_metrics(std::span<const double> latencies_ms, const LatencyConstraint& budget,
                        const ObjectiveWeights& weights);

nlohmann::json to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);

struct CalibrationTargets {
    double mean_ms = 354.0;           // noiseless mean total at the top levels
    double stage1_share = 0.80;
    double stage2_spread_ms = 160.0;  // stage-2 latency across [P05, P95]
    double cpu_time_share = 0.15;     // fraction of each stage spent on the CPU at the top levels
};

struct CalibrationCheck {
    double mean_ms = 0.0;
    double stage1_share = 0.0;
    double stage2_spread_ms = 0.0;
    bool passed = false;
};

/// Solves the cycle model at the top levels against `targets` for proposals drawn from `dataset`.
/// Throws DomainError when the targets need negative work.
LatencyModelParams calibrate(const FrequencyTable& table, const DatasetProfile& dataset,
                             const CalibrationTargets& targets, std::uint64_t seed = 7, std::size_t samples = 10000,
                             double noise_sigma = 0.03);

/// Simulates `frames` noiseless frames at the top levels and compares against the targets
/// (mean within 1 %, share within 2 points, spread within 5 %).
CalibrationCheck verify_calibration(const FrequencyTable& table, const LatencyModelParams& params,
                                    const DatasetProfile& dataset, const CalibrationTargets& targets,
                                    std::uint64_t seed = 11, std::size_t frames = 10000);

/// P-th percentile (0..100) with linear interpolation.
double percentile(std::vector<double> values, double p);

/// "jetson-fasterrcnn-kitti": device, thermal constants and calibrated latency constants.
DeviceProfile builtin_device_profile(const std::string& name = "jetson-fasterrcnn-kitti");
std::vector<std::string> builtin_device_profile_names();

/// Default latency budget for a dataset profile (kitti-like 450 ms, visdrone-like 650 ms).
double default_budget_ms(const std::string& dataset);

struct ScenarioEvent {
    long frame = 0;
    std::optional<double> ambient_c;
    std::optional<std::string> dataset;
    std::optional<double> budget_ms;
};

/// Timed events applied at frame boundaries, sorted by frame.
struct Scenario {
    std::vector<ScenarioEvent> events;

    void validate() const;
};

Scenario scenario_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);

struct EvalConfig {
    std::string dataset = "kitti-like";
    std::optional<std::filesystem::path> trace;
    std::optional<double> budget_ms;
    long frames = 3000;
    std::uint64_t seed = 1;
    OverheadModel overhead;  // decisions_per_frame comes from the governor
    ObjectiveWeights weights;
    RewardConfig reward;
};

struct EvalResult {
    std::string governor;
    Metrics metrics;
    std::vector<FrameTrace> traces;
    std::vector<FrameLogRow> rows;
};

/// Runs `gov` for cfg.frames frames on a fresh simulated device. Deterministic in cfg.seed.
EvalResult run_eval(Governor& gov, const DeviceProfile& profile, const Scenario& scenario, const EvalConfig& cfg);

/// Evaluation CSV: training-log columns plus ambient_c.
std::string eval_csv(const EvalResult& result);
void write_eval_outputs(const EvalResult& result, const std::filesystem::path& dir);

/// Builds the simulated device used for training or evaluation.
std::unique_ptr<SimulatedDevice> make_device(const DeviceProfile& profile, const std::string& dataset,
                                             const std::optional<std::filesystem::path>& trace, double budget_ms,
                                             int decisions_per_frame, const OverheadModel& overhead,
                                             std::uint64_t seed);

struct NamedMetrics {
    std::string governor;
    Metrics metrics;
};

inline constexpr const char* kReportHeader = "governor,mean_latency_ms,latency_std_ms,satisfaction_rate,mean_temp_c,throttles,objective";

/// One row per governor, columns as kReportHeader.
std::string report_table(std::span<const NamedMetrics> rows);

/// Reads every metrics.json (and frames.csv) under `inputs`, writes report.csv plus per-governor
/// temperature/latency series under `out_dir`. Returns the table.
std::string report(std::span<const std::filesystem::path> inputs, const std::filesystem::path& out_dir);

}  // namespace sds
