#include "sds/bench.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sds {

Metrics compute_metrics(std::span<const double> lat, const LatencyConstraint& budget, const ObjectiveWeights& w) {
    if (lat.empty()) throw DomainError("compute_metrics: no frames");
    w.validate();
    Metrics m;
    m.frames = lat.size();
    const auto n = static_cast<double>(lat.size());
    m.mean_latency_ms = std::accumulate(lat.begin(), lat.end(), 0.0) / n;
    double ss = 0.0;
    std::size_t met = 0;
    for (double l : lat) {
        const double d = l - m.mean_latency_ms;
        ss += d * d;
        if (l < budget.budget_ms) ++met;
        if (l > budget.budget_ms) ++m.objective_miss_count;
        m.objective_latency_sum += l;
    }
    m.latency_std_ms = std::sqrt(ss / n);
    m.satisfaction_rate = static_cast<double>(met) / n;
    m.objective_variance_term = ss;
    m.objective_value = m.objective_latency_sum + w.alpha * ss + w.beta * static_cast<double>(m.objective_miss_count);
    return m;
}

Metrics compute_metrics(std::span<const FrameTrace> traces, const LatencyConstraint& budget,
                        const ObjectiveWeights& weights) {
    if (traces.empty()) throw DomainError("compute_metrics: no frames");
    std::vector<double> lat;
    lat.reserve(traces.size());
    for (const auto& t : traces) lat.push_back(t.total_ms);
    Metrics m = compute_metrics(lat, budget, weights);
    m.max_cpu_temp = m.max_gpu_temp = -std::numeric_limits<double>::infinity();
    for (const auto& t : traces) {
        m.mean_cpu_temp += t.cpu_temp;
        m.mean_gpu_temp += t.gpu_temp;
        m.max_cpu_temp = std::max(m.max_cpu_temp, t.max_cpu_temp);
        m.max_gpu_temp = std::max(m.max_gpu_temp, t.max_gpu_temp);
        m.throttle_event_count += t.throttle_events;
    }
    m.mean_cpu_temp /= static_cast<double>(traces.size());
    m.mean_gpu_temp /= static_cast<double>(traces.size());
    return m;
}

nlohmann::json to_json(const Metrics& m) {
    return {{"frames", m.frames},
            {"mean_latency_ms", m.mean_latency_ms},
            {"latency_std_ms", m.latency_std_ms},
            {"satisfaction_rate", m.satisfaction_rate},
            {"mean_cpu_temp", m.mean_cpu_temp},
            {"mean_gpu_temp", m.mean_gpu_temp},
            {"max_cpu_temp", m.max_cpu_temp},
            {"max_gpu_temp", m.max_gpu_temp},
            {"throttle_event_count", m.throttle_event_count},
            {"objective_value", m.objective_value},
            {"objective_latency_sum", m.objective_latency_sum},
            {"objective_variance_term", m.objective_variance_term},
            {"objective_miss_count", m.objective_miss_count}};
}

Metrics metrics_from_json(const nlohmann::json& j) {
    Metrics m;
    m.frames = j.at("frames").get<std::size_t>();
    m.mean_latency_ms = j.at("mean_latency_ms").get<double>();
    m.latency_std_ms = j.at("latency_std_ms").get<double>();
    m.satisfaction_rate = j.at("satisfaction_rate").get<double>();
    m.mean_cpu_temp = j.at("mean_cpu_temp").get<double>();
    m.mean_gpu_temp = j.at("mean_gpu_temp").get<double>();
    m.max_cpu_temp = j.at("max_cpu_temp").get<double>();
    m.max_gpu_temp = j.at("max_gpu_temp").get<double>();
    m.throttle_event_count = j.at("throttle_event_count").get<int>();
    m.objective_value = j.at("objective_value").get<double>();
    m.objective_latency_sum = j.value("objective_latency_sum", 0.0);
    m.objective_variance_term = j.value("objective_variance_term", 0.0);
    m.objective_miss_count = j.value("objective_miss_count", std::size_t{0});
    return m;
}

double percentile(std::vector<double> v, double p) {
    if (v.empty()) throw DomainError("percentile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

LatencyModelParams calibrate(const FrequencyTable& table, const DatasetProfile& dataset,
                             const CalibrationTargets& t, std::uint64_t seed, std::size_t samples,
                             double noise_sigma) {
    if (!(t.mean_ms > 0.0) || !(t.stage1_share > 0.0 && t.stage1_share <= 1.0) || !(t.stage2_spread_ms >= 0.0) ||
        !(t.cpu_time_share >= 0.0 && t.cpu_time_share <= 1.0)) {
        throw DomainError("calibration targets out of range");
    }
    const double f_cpu = table.cpu_levels().back() / 1000.0;
    const double f_gpu = table.gpu_levels().back() / 1000.0;

    Rng rng(seed);
    std::vector<double> proposals;
    proposals.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        proposals.push_back(static_cast<double>(sample_workload(dataset, rng).proposals));
    }
    const double mean_p = std::accumulate(proposals.begin(), proposals.end(), 0.0) / static_cast<double>(samples);
    const double p_range = percentile(proposals, 95.0) - percentile(proposals, 5.0);

    const double stage1_ms = t.mean_ms * t.stage1_share;
    const double stage2_mean_ms = t.mean_ms - stage1_ms;
    double slope_ms = 0.0;
    if (t.stage2_spread_ms > 0.0) {
        if (!(p_range > 0.0)) throw DomainError("calibration: proposal range is degenerate, cannot fit a spread");
        slope_ms = t.stage2_spread_ms / p_range;
    }
    const double base_ms = stage2_mean_ms - slope_ms * mean_p;
    if (base_ms < -1e-9) {
        throw DomainError(fmt::format("calibration infeasible: stage-2 base would be {:.2f} ms", base_ms));
    }

    const double cs = t.cpu_time_share;
    LatencyModelParams p;
    p.stage1_cpu_gcycles = stage1_ms * cs * f_cpu;
    p.stage1_gpu_gcycles = stage1_ms * (1.0 - cs) * f_gpu;
    p.stage2_base_cpu_gcycles = std::max(0.0, base_ms) * cs * f_cpu;
    p.stage2_base_gpu_gcycles = std::max(0.0, base_ms) * (1.0 - cs) * f_gpu;
    p.stage2_per_proposal_cpu_gcycles = slope_ms * cs * f_cpu;
    p.stage2_per_proposal_gpu_gcycles = slope_ms * (1.0 - cs) * f_gpu;
    p.noise_sigma = noise_sigma;
    p.validate();
    return p;
}

CalibrationCheck verify_calibration(const FrequencyTable& table, const LatencyModelParams& params,
                                    const DatasetProfile& dataset, const CalibrationTargets& t, std::uint64_t seed,
                                    std::size_t frames) {
    const double f_cpu = table.cpu_levels().back();
    const double f_gpu = table.gpu_levels().back();
    Rng rng(seed);
    double sum_total = 0.0;
    double sum_stage1 = 0.0;
    std::vector<double> stage2;
    stage2.reserve(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        const FrameWorkload w = sample_workload(dataset, rng, static_cast<long>(i));
        const StageLatency l = frame_latency(w, f_cpu, f_gpu, f_cpu, f_gpu, params);
        sum_total += l.stage1_ms + l.stage2_ms;
        sum_stage1 += l.stage1_ms;
        stage2.push_back(l.stage2_ms);
    }
    CalibrationCheck c;
    c.mean_ms = sum_total / static_cast<double>(frames);
    c.stage1_share = sum_stage1 / sum_total;
    c.stage2_spread_ms = percentile(stage2, 95.0) - percentile(stage2, 5.0);
    const bool spread_ok = t.stage2_spread_ms == 0.0
                               ? std::abs(c.stage2_spread_ms) < 1e-9
                               : std::abs(c.stage2_spread_ms - t.stage2_spread_ms) <= 0.05 * t.stage2_spread_ms;
    c.passed = std::abs(c.mean_ms - t.mean_ms) <= 0.01 * t.mean_ms &&
               std::abs(c.stage1_share - t.stage1_share) <= 0.02 && spread_ok;
    return c;
}

DeviceProfile builtin_device_profile(const std::string& name) {
    if (name != "jetson-fasterrcnn-kitti") throw DomainError("unknown device profile: " + name);
    FrequencyTable table({576.0, 883.0, 1190.0, 1510.0}, {204.0, 344.0, 484.0, 625.0});
    // Sized so that sustained top-level operation settles above the throttle point at 25 °C ambient,
    // while mid GPU levels stay below the 70 °C target.
    ProcessorThermalParams cpu{3.0, 10.0, 20.0, 1.5, 0.3};
    ProcessorThermalParams gpu{3.75, 8.0, 20.0, 40.0, 0.5};
    ThermalConfig thermal{70.0, 80.0, 5.0};
    const LatencyModelParams latency = calibrate(table, dataset_profile("kitti-like"), CalibrationTargets{});
    return {name, table, cpu, gpu, latency, 25.0, thermal};
}

std::vector<std::string> builtin_device_profile_names() { return {"jetson-fasterrcnn-kitti"}; }

double default_budget_ms(const std::string& dataset) {
    if (dataset == "kitti-like") return 450.0;
    if (dataset == "visdrone-like") return 650.0;
    throw DomainError("no default budget for dataset: " + dataset);
}

void Scenario::validate() const {
    for (std::size_t i = 0; i < events.size(); ++i) {
        if (events[i].frame < 0) throw DomainError("scenario event frame must be non-negative");
        if (i > 0 && events[i].frame < events[i - 1].frame) throw DomainError("scenario events must be sorted by frame");
        if (events[i].budget_ms && !(*events[i].budget_ms > 0.0)) throw DomainError("scenario budget must be positive");
        if (events[i].dataset) dataset_profile(*events[i].dataset);
    }
}

Scenario scenario_from_json(const nlohmann::json& j) {
    Scenario s;
    try {
        for (const auto& e : j.at("events")) {
            ScenarioEvent ev;
            ev.frame = e.at("frame").get<long>();
            if (e.contains("ambient_c")) ev.ambient_c = e.at("ambient_c").get<double>();
            if (e.contains("dataset")) ev.dataset = e.at("dataset").get<std::string>();
            if (e.contains("budget_ms")) ev.budget_ms = e.at("budget_ms").get<double>();
            s.events.push_back(ev);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("invalid scenario: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DomainError(std::string("invalid scenario: ") + e.what());
    }
    s.validate();
    return s;
}

nlohmann::json to_json(const Scenario& s) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : s.events) {
        nlohmann::json j{{"frame", e.frame}};
        if (e.ambient_c) j["ambient_c"] = *e.ambient_c;
        if (e.dataset) j["dataset"] = *e.dataset;
        if (e.budget_ms) j["budget_ms"] = *e.budget_ms;
        events.push_back(j);
    }
    return {{"events", events}};
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenario: " + path.string());
    return scenario_from_json(nlohmann::json::parse(in));
}

std::unique_ptr<SimulatedDevice> make_device(const DeviceProfile& profile, const std::string& dataset,
                                             const std::optional<std::filesystem::path>& trace, double budget_ms,
                                             int decisions_per_frame, const OverheadModel& overhead,
                                             std::uint64_t seed) {
    std::unique_ptr<WorkloadSource> source;
    if (trace) {
        source = std::make_unique<TraceWorkload>(load_trace(*trace));
    } else {
        source = std::make_unique<SampledWorkload>(dataset_profile(dataset), seed * 2654435761ull + 1);
    }
    OverheadModel o = overhead;
    o.decisions_per_frame = decisions_per_frame;
    return std::make_unique<SimulatedDevice>(profile, std::move(source), LatencyConstraint(budget_ms), o, seed);
}

EvalResult run_eval(Governor& gov, const DeviceProfile& profile, const Scenario& scenario, const EvalConfig& cfg) {
    scenario.validate();
    if (cfg.frames <= 0) throw DomainError("evaluation needs at least one frame");
    const double budget = cfg.budget_ms.value_or(default_budget_ms(cfg.dataset));
    auto device = make_device(profile, cfg.dataset, cfg.trace, budget, gov.decisions_per_frame(), cfg.overhead,
                              cfg.seed);

    EvalResult result;
    result.governor = gov.name();
    result.traces.reserve(static_cast<std::size_t>(cfg.frames));
    SlackWindow window(cfg.reward.window_n);
    const auto* learned = dynamic_cast<const LearnedGovernor*>(&gov);
    std::size_t next_event = 0;

    for (long frame = 0; frame < cfg.frames; ++frame) {
        for (; next_event < scenario.events.size() && scenario.events[next_event].frame == frame; ++next_event) {
            const ScenarioEvent& ev = scenario.events[next_event];
            if (ev.ambient_c) device->simulator().set_ambient(*ev.ambient_c);
            if (ev.budget_ms) device->set_budget(LatencyConstraint(*ev.budget_ms));
            if (ev.dataset) {
                if (auto* sampled = dynamic_cast<SampledWorkload*>(&device->workload())) {
                    sampled->set_profile(dataset_profile(*ev.dataset));
                } else {
                    device->set_workload(std::make_unique<SampledWorkload>(dataset_profile(*ev.dataset),
                                                                           cfg.seed * 2654435761ull + 3));
                }
            }
        }

        const LatencyConstraint constraint = device->budget();
        const double eps_t = learned != nullptr ? learned->agent().cooldown_probability() : 0.0;
        const Observation start = device->frame_start();
        const Action a = gov.first(start, constraint);
        const Observation mid = device->after_rpn(a);
        const Action b = gov.second(mid, a, constraint);
        FrameTrace trace = device->finish_frame(b);
        gov.frame_done(trace);

        window.push(constraint.budget_ms - trace.total_ms);
        Observation end = start;
        end.cpu_temp = trace.cpu_temp;
        end.gpu_temp = trace.gpu_temp;
        const FrameRewards r =
            frame_rewards(trace, mid, end, window, cfg.reward, profile.thermal, constraint);
        result.rows.push_back({frame, trace, r.even, r.odd, 0.0, eps_t});
        result.traces.push_back(std::move(trace));
    }
    // Satisfaction is measured against the budget in force when each frame ran.
    std::vector<double> latencies;
    std::size_t met = 0;
    for (std::size_t i = 0; i < result.traces.size(); ++i) latencies.push_back(result.traces[i].total_ms);
    result.metrics = compute_metrics(result.traces, LatencyConstraint(budget), cfg.weights);
    if (std::any_of(scenario.events.begin(), scenario.events.end(), [](const auto& e) { return e.budget_ms; })) {
        double b = budget;
        std::size_t ev = 0;
        std::size_t misses = 0;
        for (std::size_t i = 0; i < latencies.size(); ++i) {
            for (; ev < scenario.events.size() && scenario.events[ev].frame == static_cast<long>(i); ++ev) {
                if (scenario.events[ev].budget_ms) b = *scenario.events[ev].budget_ms;
            }
            if (latencies[i] < b) ++met;
            if (latencies[i] > b) ++misses;
        }
        result.metrics.satisfaction_rate = static_cast<double>(met) / static_cast<double>(latencies.size());
        result.metrics.objective_miss_count = misses;
        result.metrics.objective_value = result.metrics.objective_latency_sum +
                                         cfg.weights.alpha * result.metrics.objective_variance_term +
                                         cfg.weights.beta * static_cast<double>(misses);
    }
    return result;
}

std::string eval_csv(const EvalResult& result) {
    std::string out = std::string(kTrainingLogHeader) + ",ambient_c\n";
    for (const auto& row : result.rows) {
        out += format_log_row(row);
        out += fmt::format(",{:.4f}\n", row.trace.ambient_c);
    }
    return out;
}

void write_eval_outputs(const EvalResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "frames.csv", std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / "frames.csv").string());
        out << eval_csv(result);
    }
    std::ofstream out(dir / "metrics.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / "metrics.json").string());
    out << nlohmann::json{{"governor", result.governor}, {"metrics", to_json(result.metrics)}}.dump(2) << '\n';
}

std::string report_table(std::span<const NamedMetrics> rows) {
    std::string out = std::string(kReportHeader) + "\n";
    for (const auto& r : rows) {
        const Metrics& m = r.metrics;
        out += fmt::format("{},{:.4f},{:.4f},{:.6f},{:.4f},{},{:.4f}\n", r.governor, m.mean_latency_ms,
                           m.latency_std_ms, m.satisfaction_rate, std::max(m.mean_cpu_temp, m.mean_gpu_temp),
                           m.throttle_event_count, m.objective_value);
    }
    return out;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace

std::string report(std::span<const std::filesystem::path> inputs, const std::filesystem::path& out_dir) {
    std::vector<NamedMetrics> rows;
    std::vector<std::filesystem::path> dirs;
    for (const auto& in : inputs) {
        if (std::filesystem::exists(in / "metrics.json")) {
            dirs.push_back(in);
            continue;
        }
        if (!std::filesystem::is_directory(in)) throw std::runtime_error("not an evaluation directory: " + in.string());
        std::vector<std::filesystem::path> found;
        for (const auto& e : std::filesystem::recursive_directory_iterator(in)) {
            if (e.path().filename() == "metrics.json") found.push_back(e.path().parent_path());
        }
        std::sort(found.begin(), found.end());
        dirs.insert(dirs.end(), found.begin(), found.end());
    }
    if (dirs.empty()) throw std::runtime_error("no metrics.json found under the given inputs");

    std::filesystem::create_directories(out_dir);
    for (const auto& dir : dirs) {
        std::ifstream in(dir / "metrics.json");
        const auto doc = nlohmann::json::parse(in);
        const std::string gov = doc.at("governor").get<std::string>();
        rows.push_back({gov, metrics_from_json(doc.at("metrics"))});

        if (!std::filesystem::exists(dir / "frames.csv")) continue;
        const auto csv = read_csv(dir / "frames.csv");
        if (csv.empty()) continue;
        const auto& header = csv.front();
        const auto col = [&](const std::string& name) {
            const auto it = std::find(header.begin(), header.end(), name);
            if (it == header.end()) throw std::runtime_error("frames.csv lacks column " + name);
            return static_cast<std::size_t>(it - header.begin());
        };
        const std::size_t c_frame = col("frame"), c_total = col("total_ms"), c_s1 = col("stage1_ms"),
                          c_s2 = col("stage2_ms"), c_cpu = col("cpu_temp"), c_gpu = col("gpu_temp"),
                          c_amb = col("ambient_c");
        const std::string stem = fmt::format("{}_{}", gov, dir.filename().string());
        std::ofstream temp(out_dir / (stem + "_temperature.csv"));
        std::ofstream lat(out_dir / (stem + "_latency.csv"));
        temp << "frame,cpu_temp,gpu_temp,ambient_c\n";
        lat << "frame,stage1_ms,stage2_ms,total_ms\n";
        for (std::size_t i = 1; i < csv.size(); ++i) {
            const auto& r = csv[i];
            temp << r[c_frame] << ',' << r[c_cpu] << ',' << r[c_gpu] << ',' << r[c_amb] << '\n';
            lat << r[c_frame] << ',' << r[c_s1] << ',' << r[c_s2] << ',' << r[c_total] << '\n';
        }
    }
    const std::string table = report_table(rows);
    std::ofstream(out_dir / "report.csv") << table;
    return table;
}

}  // namespace sds
