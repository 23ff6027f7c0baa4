#include "sds/device_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace sds {

void ProcessorThermalParams::validate() const {
    if (!(heat_capacity > 0.0 && resistance_to_ambient > 0.0 && coupling_resistance > 0.0 && kappa > 0.0 &&
          idle_power > 0.0)) {
        throw DomainError("processor thermal parameters must all be positive");
    }
}

void LatencyModelParams::validate() const {
    for (double w : {stage1_cpu_gcycles, stage1_gpu_gcycles, stage2_base_cpu_gcycles, stage2_base_gpu_gcycles,
                     stage2_per_proposal_cpu_gcycles, stage2_per_proposal_gpu_gcycles}) {
        if (!(w >= 0.0)) throw DomainError("latency work terms must be non-negative");
    }
    if (!(noise_sigma >= 0.0 && noise_sigma <= 0.2)) throw DomainError("noise_sigma must lie in [0, 0.2]");
}

void DeviceProfile::validate() const {
    cpu.validate();
    gpu.validate();
    latency.validate();
    thermal.validate();
    if (!std::isfinite(ambient_c)) throw DomainError("ambient temperature must be finite");
}

namespace {

nlohmann::json thermal_to_json(const ProcessorThermalParams& p) {
    return {{"heat_capacity_j_per_c", p.heat_capacity},
            {"r_ambient_c_per_w", p.resistance_to_ambient},
            {"r_couple_c_per_w", p.coupling_resistance},
            {"kappa_w_per_ghz3", p.kappa},
            {"idle_w", p.idle_power}};
}

ProcessorThermalParams thermal_from_json(const nlohmann::json& j) {
    ProcessorThermalParams p;
    p.heat_capacity = j.at("heat_capacity_j_per_c").get<double>();
    p.resistance_to_ambient = j.at("r_ambient_c_per_w").get<double>();
    p.coupling_resistance = j.at("r_couple_c_per_w").get<double>();
    p.kappa = j.at("kappa_w_per_ghz3").get<double>();
    p.idle_power = j.at("idle_w").get<double>();
    return p;
}

}  // namespace

DeviceProfile profile_from_json(const nlohmann::json& doc) {
    try {
        LatencyModelParams lat;
        lat.stage1_cpu_gcycles = doc.at("stage1_cpu_gcycles").get<double>();
        lat.stage1_gpu_gcycles = doc.at("stage1_gpu_gcycles").get<double>();
        lat.stage2_base_cpu_gcycles = doc.at("stage2_base_cpu_gcycles").get<double>();
        lat.stage2_base_gpu_gcycles = doc.at("stage2_base_gpu_gcycles").get<double>();
        lat.stage2_per_proposal_cpu_gcycles = doc.at("stage2_per_proposal_cpu_gcycles").get<double>();
        lat.stage2_per_proposal_gpu_gcycles = doc.at("stage2_per_proposal_gpu_gcycles").get<double>();
        lat.noise_sigma = doc.at("noise_sigma").get<double>();

        ThermalConfig thermal;
        thermal.throttle_c = doc.at("throttle_c").get<double>();
        thermal.hysteresis_c = doc.at("hysteresis_c").get<double>();
        thermal.threshold_c = doc.value("threshold_c", thermal.throttle_c - 10.0);

        DeviceProfile profile{doc.value("name", std::string("custom")),
                              FrequencyTable(doc.at("cpu_levels_mhz").get<std::vector<double>>(),
                                             doc.at("gpu_levels_mhz").get<std::vector<double>>()),
                              thermal_from_json(doc.at("cpu")),
                              thermal_from_json(doc.at("gpu")),
                              lat,
                              doc.at("ambient_c").get<double>(),
                              thermal};
        profile.validate();
        return profile;
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("invalid device profile: ") + e.what());
    }
}

nlohmann::json profile_to_json(const DeviceProfile& p) {
    return {{"name", p.name},
            {"cpu_levels_mhz", p.table.cpu_levels()},
            {"gpu_levels_mhz", p.table.gpu_levels()},
            {"cpu", thermal_to_json(p.cpu)},
            {"gpu", thermal_to_json(p.gpu)},
            {"stage1_cpu_gcycles", p.latency.stage1_cpu_gcycles},
            {"stage1_gpu_gcycles", p.latency.stage1_gpu_gcycles},
            {"stage2_base_cpu_gcycles", p.latency.stage2_base_cpu_gcycles},
            {"stage2_base_gpu_gcycles", p.latency.stage2_base_gpu_gcycles},
            {"stage2_per_proposal_cpu_gcycles", p.latency.stage2_per_proposal_cpu_gcycles},
            {"stage2_per_proposal_gpu_gcycles", p.latency.stage2_per_proposal_gpu_gcycles},
            {"noise_sigma", p.latency.noise_sigma},
            {"ambient_c", p.ambient_c},
            {"threshold_c", p.thermal.threshold_c},
            {"throttle_c", p.thermal.throttle_c},
            {"hysteresis_c", p.thermal.hysteresis_c}};
}

DeviceProfile load_profile(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open device profile: " + path.string());
    return profile_from_json(nlohmann::json::parse(in));
}

void save_profile(const std::filesystem::path& path, const DeviceProfile& profile) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write device profile: " + path.string());
    out << profile_to_json(profile).dump(2) << '\n';
}

DeviceSimState cold_state(const DeviceProfile& profile) {
    DeviceSimState s;
    s.cpu_temp = s.gpu_temp = s.ambient_temp = profile.ambient_c;
    return s;
}

double power(double freq_mhz, const ProcessorThermalParams& params) {
    const double ghz = freq_mhz / 1000.0;
    return params.kappa * ghz * ghz * ghz + params.idle_power;
}

double max_stable_step_ms(const ProcessorThermalParams& cpu, const ProcessorThermalParams& gpu) {
    const double tau_s = std::min({cpu.heat_capacity * cpu.resistance_to_ambient,
                                   cpu.heat_capacity * cpu.coupling_resistance,
                                   gpu.heat_capacity * gpu.resistance_to_ambient,
                                   gpu.heat_capacity * gpu.coupling_resistance});
    return tau_s * 1000.0 / 4.0;
}

DeviceSimState step_thermal(const DeviceSimState& state, double dt_ms, double cpu_power, double gpu_power,
                            const ProcessorThermalParams& cpu, const ProcessorThermalParams& gpu) {
    if (!(dt_ms > 0.0) || dt_ms > max_stable_step_ms(cpu, gpu)) {
        throw DomainError("thermal step outside the forward-Euler stability bound");
    }
    const double dt_s = dt_ms / 1000.0;
    const double t_cpu = state.cpu_temp;
    const double t_gpu = state.gpu_temp;
    const double t_amb = state.ambient_temp;

    DeviceSimState next = state;
    next.cpu_temp = t_cpu + (dt_s / cpu.heat_capacity) *
                                (cpu_power - (t_cpu - t_amb) / cpu.resistance_to_ambient -
                                 (t_cpu - t_gpu) / cpu.coupling_resistance);
    next.gpu_temp = t_gpu + (dt_s / gpu.heat_capacity) *
                                (gpu_power - (t_gpu - t_amb) / gpu.resistance_to_ambient -
                                 (t_gpu - t_cpu) / gpu.coupling_resistance);
    next.sim_clock_ms = state.sim_clock_ms + dt_ms;
    return next;
}

DeviceSimState check_throttle(const DeviceSimState& state, const ThermalConfig& thermal) {
    DeviceSimState next = state;
    const auto update = [&](bool throttled, double temp) {
        if (temp > thermal.throttle_c) return true;
        if (throttled && temp < thermal.throttle_c - thermal.hysteresis_c) return false;
        return throttled;
    };
    next.cpu_throttled = update(state.cpu_throttled, state.cpu_temp);
    next.gpu_throttled = update(state.gpu_throttled, state.gpu_temp);
    return next;
}

StageWork stage1_work(const LatencyModelParams& p) { return {p.stage1_cpu_gcycles, p.stage1_gpu_gcycles}; }

StageWork stage2_work(const LatencyModelParams& p, long proposals) {
    const auto n = static_cast<double>(proposals);
    return {p.stage2_base_cpu_gcycles + p.stage2_per_proposal_cpu_gcycles * n,
            p.stage2_base_gpu_gcycles + p.stage2_per_proposal_gpu_gcycles * n};
}

double stage_time_ms(const StageWork& work, double cpu_mhz, double gpu_mhz) {
    return work.cpu_gcycles / (cpu_mhz / 1000.0) + work.gpu_gcycles / (gpu_mhz / 1000.0);
}

namespace {

double lognormal_factor(double sigma, Rng* rng) {
    if (rng == nullptr || sigma == 0.0) return 1.0;
    std::normal_distribution<double> n(0.0, sigma);
    return std::exp(n(*rng));
}

}  // namespace

StageLatency frame_latency(const FrameWorkload& workload, double cpu_mhz_first, double gpu_mhz_first,
                           double cpu_mhz_second, double gpu_mhz_second, const LatencyModelParams& params,
                           Rng* rng) {
    StageLatency out;
    out.stage1_ms = stage_time_ms(stage1_work(params), cpu_mhz_first, gpu_mhz_first) *
                    lognormal_factor(params.noise_sigma, rng);
    out.stage2_ms = stage_time_ms(stage2_work(params, workload.proposals), cpu_mhz_second, gpu_mhz_second) *
                    lognormal_factor(params.noise_sigma, rng);
    return out;
}

DeviceSimulator::DeviceSimulator(DeviceProfile profile, std::uint64_t seed, double dt_ms)
    : profile_(std::move(profile)), state_(cold_state(profile_)), rng_(seed), dt_ms_(dt_ms) {
    profile_.validate();
    if (!(dt_ms_ > 0.0) || dt_ms_ > max_stable_step_ms(profile_.cpu, profile_.gpu)) {
        throw DomainError("simulation step violates the thermal stability bound");
    }
}

double DeviceSimulator::apply(const Action& action) {
    if (action.cpu_level >= profile_.table.cpu_count() || action.gpu_level >= profile_.table.gpu_count()) {
        throw DomainError("action level out of table bounds");
    }
    const std::size_t cpu_before = state_.effective_cpu_level();
    const std::size_t gpu_before = state_.effective_gpu_level();
    state_.cpu_level = action.cpu_level;
    state_.gpu_level = action.gpu_level;
    if (state_.effective_cpu_level() != cpu_before || state_.effective_gpu_level() != gpu_before) {
        state_.sim_clock_ms += kSwitchDeadTimeMs;
        return kSwitchDeadTimeMs;
    }
    return 0.0;
}

double DeviceSimulator::noise_factor() { return lognormal_factor(profile_.latency.noise_sigma, &rng_); }

DeviceSimulator::StageResult DeviceSimulator::run_stage(const StageWork& work, std::vector<TempSample>* samples) {
    const double eta = noise_factor();
    const StageWork scaled{work.cpu_gcycles * eta, work.gpu_gcycles * eta};
    return advance(0.0, 0.0, 0.0, samples, &scaled);
}

DeviceSimulator::StageResult DeviceSimulator::idle(double ms, std::vector<TempSample>* samples) {
    return advance(ms, 0.0, 0.0, samples, nullptr);
}

DeviceSimulator::StageResult DeviceSimulator::advance(double ms, double cpu_share, double gpu_share,
                                                      std::vector<TempSample>* samples, const StageWork* work) {
    StageResult result;
    // Fraction of the stage retired so far; progress rate follows the current effective clocks.
    double progress = 0.0;
    const auto& table = profile_.table;

    while (true) {
        double step = 0.0;
        double stage_ms = 0.0;
        bool finishing = false;
        if (work != nullptr) {
            const double f_cpu = table.cpu_mhz(state_.effective_cpu_level());
            const double f_gpu = table.gpu_mhz(state_.effective_gpu_level());
            const double cpu_ms = work->cpu_gcycles / (f_cpu / 1000.0);
            const double gpu_ms = work->gpu_gcycles / (f_gpu / 1000.0);
            stage_ms = cpu_ms + gpu_ms;
            if (stage_ms <= 0.0) break;
            cpu_share = cpu_ms / stage_ms;
            gpu_share = gpu_ms / stage_ms;
            const double remaining = (1.0 - progress) * stage_ms;
            if (remaining <= 0.0) break;
            finishing = remaining <= dt_ms_;
            step = finishing ? remaining : dt_ms_;
        } else {
            const double remaining = ms - result.elapsed_ms;
            if (remaining <= 1e-12) break;
            step = std::min(dt_ms_, remaining);
        }

        const double f_cpu = table.cpu_mhz(state_.effective_cpu_level());
        const double f_gpu = table.gpu_mhz(state_.effective_gpu_level());
        const double p_cpu = profile_.cpu.idle_power + cpu_share * (power(f_cpu, profile_.cpu) - profile_.cpu.idle_power);
        const double p_gpu = profile_.gpu.idle_power + gpu_share * (power(f_gpu, profile_.gpu) - profile_.gpu.idle_power);
        state_ = step_thermal(state_, step, p_cpu, p_gpu, profile_.cpu, profile_.gpu);
        result.elapsed_ms += step;
        result.cpu_busy_ms += cpu_share * step;
        result.gpu_busy_ms += gpu_share * step;

        if (work != nullptr) {
            progress = finishing ? 1.0 : progress + step / stage_ms;
        }

        const bool cpu_before = state_.cpu_throttled;
        const bool gpu_before = state_.gpu_throttled;
        const std::size_t cpu_eff = state_.effective_cpu_level();
        const std::size_t gpu_eff = state_.effective_gpu_level();
        state_ = check_throttle(state_, profile_.thermal);
        result.throttle_events += (!cpu_before && state_.cpu_throttled) + (!gpu_before && state_.gpu_throttled);
        if (state_.effective_cpu_level() != cpu_eff || state_.effective_gpu_level() != gpu_eff) {
            state_.sim_clock_ms += kSwitchDeadTimeMs;
            result.elapsed_ms += kSwitchDeadTimeMs;
        }
        if (samples != nullptr) {
            samples->push_back({state_.sim_clock_ms, state_.cpu_temp, state_.gpu_temp});
        }
        if (work != nullptr && progress >= 1.0) break;
    }
    return result;
}

SampledWorkload::SampledWorkload(DatasetProfile profile, std::uint64_t seed) : profile_(std::move(profile)), rng_(seed) {
    profile_.validate();
}

FrameWorkload SampledWorkload::next() { return sample_workload(profile_, rng_, next_id_++); }

TraceWorkload::TraceWorkload(std::vector<FrameWorkload> frames) : frames_(std::move(frames)) {
    if (frames_.empty()) throw DomainError("workload trace is empty");
}

FrameWorkload TraceWorkload::next() {
    const FrameWorkload fw = frames_[pos_];
    pos_ = (pos_ + 1) % frames_.size();
    return fw;
}

SimulatedDevice::SimulatedDevice(DeviceProfile profile, std::unique_ptr<WorkloadSource> workload,
                                 LatencyConstraint budget, OverheadModel overhead, std::uint64_t seed)
    : sim_(std::move(profile), seed), workload_(std::move(workload)), budget_(budget), overhead_(overhead) {
    if (!workload_) throw DomainError("simulated device needs a workload source");
    if (overhead_.decisions_per_frame < 0 || overhead_.decisions_per_frame > 2) {
        throw DomainError("decisions_per_frame must be 0, 1 or 2");
    }
}

Observation SimulatedDevice::frame_start() {
    if (phase_ != Phase::Idle) throw std::logic_error("frame_start called mid-frame");
    current_ = workload_->next();
    trace_ = FrameTrace{};
    trace_.frame_id = current_.frame_id;
    trace_.proposals = current_.proposals;
    trace_.ambient_c = sim_.state().ambient_temp;
    phase_ = Phase::Started;

    const auto& s = sim_.state();
    return {Stage::FrameStart, s.cpu_temp, s.gpu_temp, s.cpu_level, s.gpu_level, budget_.budget_ms, std::nullopt};
}

Observation SimulatedDevice::after_rpn(const Action& first) {
    if (phase_ != Phase::Started) throw std::logic_error("after_rpn called out of order");
    if (overhead_.decisions_per_frame >= 1) {
        trace_.overhead_ms += sim_.idle(overhead_.per_decision_ms(), &trace_.temps).elapsed_ms;
    }
    trace_.first = first;
    trace_.stage1_ms = sim_.apply(first);
    const auto r = sim_.run_stage(stage1_work(sim_.profile().latency), &trace_.temps);
    trace_.stage1_ms += r.elapsed_ms;
    trace_.cpu_busy_ms += r.cpu_busy_ms;
    trace_.gpu_busy_ms += r.gpu_busy_ms;
    trace_.throttle_events += r.throttle_events;
    phase_ = Phase::Stage1Done;

    // The post-RPN observation message itself is in flight before the agent sees it.
    const double seen_at = trace_.overhead_ms + trace_.stage1_ms +
                           (overhead_.decisions_per_frame == 2 ? overhead_.message_ms : 0.0);
    const auto& s = sim_.state();
    return {Stage::AfterRpn, s.cpu_temp,  s.gpu_temp, s.cpu_level, s.gpu_level, budget_.budget_ms - seen_at,
            current_.proposals};
}

FrameTrace SimulatedDevice::finish_frame(const Action& second) {
    if (phase_ != Phase::Stage1Done) throw std::logic_error("finish_frame called out of order");
    if (overhead_.decisions_per_frame == 2) {
        trace_.overhead_ms += sim_.idle(overhead_.per_decision_ms(), &trace_.temps).elapsed_ms;
    }
    trace_.second = second;
    trace_.stage2_ms = sim_.apply(second);
    const auto r = sim_.run_stage(stage2_work(sim_.profile().latency, current_.proposals), &trace_.temps);
    trace_.stage2_ms += r.elapsed_ms;
    trace_.cpu_busy_ms += r.cpu_busy_ms;
    trace_.gpu_busy_ms += r.gpu_busy_ms;
    trace_.throttle_events += r.throttle_events;
    trace_.total_ms = trace_.stage1_ms + trace_.stage2_ms + trace_.overhead_ms;

    const auto& s = sim_.state();
    trace_.cpu_temp = s.cpu_temp;
    trace_.gpu_temp = s.gpu_temp;
    trace_.max_cpu_temp = s.cpu_temp;
    trace_.max_gpu_temp = s.gpu_temp;
    for (const auto& t : trace_.temps) {
        trace_.max_cpu_temp = std::max(trace_.max_cpu_temp, t.cpu_temp);
        trace_.max_gpu_temp = std::max(trace_.max_gpu_temp, t.gpu_temp);
    }
    phase_ = Phase::Idle;
    return trace_;
}

FrameTrace run_frame(DeviceEnvironment& env, const std::function<Action(const Observation&)>& first,
                     const std::function<Action(const Observation&)>& second) {
    const Observation start = env.frame_start();
    const Observation mid = env.after_rpn(first(start));
    return env.finish_frame(second(mid));
}

}  // namespace sds
