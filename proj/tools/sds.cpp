// Command-line front end: calibrate, train, eval, report, serve-device, serve-agent.

#include "sds/bench.hpp"
#include "sds/protocol.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Every tunable with its default. A --config file overrides these; flags override the file.
json default_config() {
    sds::EvalConfig eval;
    return json{
        {"profile", "jetson-fasterrcnn-kitti"},
        {"dataset", eval.dataset},
        {"budget_ms", nullptr},
        {"trace", nullptr},
        {"frames", eval.frames},
        {"seed", eval.seed},
        {"overhead", {{"message_ms", eval.overhead.message_ms}, {"decision_ms", eval.overhead.decision_ms}}},
        {"objective", {{"alpha", eval.weights.alpha}, {"beta", eval.weights.beta}}},
        {"agent", sds::to_json(sds::AgentConfig{})},
        {"port", sds::protocol::kDefaultPort},
        {"host", "127.0.0.1"},
    };
}

struct Options {
    fs::path config_path;
    std::string profile;
    std::string dataset;
    double budget_ms = 0.0;
    std::string trace;
    long frames = 0;
    std::uint64_t seed = 0;
    std::string governor;
    std::string checkpoint;
    std::string scenario;
    std::string out;
    std::string log;
    std::vector<std::string> inputs;
    std::vector<std::size_t> fixed_levels;
    std::uint16_t port = 0;
    std::string host;
    int sessions = 0;
    bool listen = false;
};

// Merges the config file (if any) and the flags actually given on the command line.
json resolve(const Options& o, const CLI::App& cmd) {
    json cfg = default_config();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw std::runtime_error("cannot open config file: " + o.config_path.string());
        cfg.merge_patch(json::parse(in));
    }
    auto given = [&](const char* flag) {
        const auto* opt = cmd.get_option_no_throw(flag);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--profile")) cfg["profile"] = o.profile;
    if (given("--dataset")) cfg["dataset"] = o.dataset;
    if (given("--budget")) cfg["budget_ms"] = o.budget_ms;
    if (given("--trace")) cfg["trace"] = o.trace;
    if (given("--frames")) cfg["frames"] = o.frames;
    if (given("--seed")) cfg["seed"] = o.seed;
    if (given("--port")) cfg["port"] = o.port;
    if (given("--host")) cfg["host"] = o.host;
    return cfg;
}

sds::DeviceProfile load_device_profile(const std::string& name_or_path) {
    if (fs::exists(name_or_path)) return sds::load_profile(name_or_path);
    return sds::builtin_device_profile(name_or_path);
}

double budget_of(const json& cfg) {
    return cfg["budget_ms"].is_null() ? sds::default_budget_ms(cfg["dataset"].get<std::string>())
                                      : cfg["budget_ms"].get<double>();
}

std::optional<fs::path> trace_of(const json& cfg) {
    if (cfg["trace"].is_null()) return std::nullopt;
    return fs::path(cfg["trace"].get<std::string>());
}

sds::OverheadModel overhead_of(const json& cfg) {
    sds::OverheadModel o;
    o.message_ms = cfg["overhead"].value("message_ms", o.message_ms);
    o.decision_ms = cfg["overhead"].value("decision_ms", o.decision_ms);
    return o;
}

sds::AgentConfig agent_config_of(const json& cfg, sds::AgentKind kind, bool frames_given) {
    sds::AgentConfig a = sds::agent_config_from_json(cfg["agent"]);
    a.kind = kind;
    a.seed = cfg["seed"].get<std::uint64_t>();
    // The top-level frame count is the evaluation length; training keeps its own cap unless asked.
    if (frames_given) a.max_frames = cfg["frames"].get<long>();
    a.validate();
    return a;
}

int cmd_calibrate(const Options& o, const CLI::App& cmd) {
    const json cfg = resolve(o, cmd);
    sds::DeviceProfile profile = load_device_profile(cfg["profile"]);
    const auto dataset = sds::dataset_profile(cfg["dataset"]);
    const sds::CalibrationTargets targets;
    profile.latency = sds::calibrate(profile.table, dataset, targets, cfg["seed"].get<std::uint64_t>());
    const auto check = sds::verify_calibration(profile.table, profile.latency, dataset, targets);
    fmt::print("mean_ms {:.2f} (target {:.1f})\nstage1_share {:.4f} (target {:.2f})\nstage2_spread_ms {:.2f} "
               "(target {:.1f})\n{}\n",
               check.mean_ms, targets.mean_ms, check.stage1_share, targets.stage1_share, check.stage2_spread_ms,
               targets.stage2_spread_ms, check.passed ? "PASS" : "FAIL");
    if (!o.out.empty()) sds::save_profile(o.out, profile);
    return check.passed ? 0 : 1;
}

int cmd_train(const Options& o, const CLI::App& cmd) {
    const json cfg = resolve(o, cmd);
    const auto kind = sds::agent_kind_from_string(o.governor);
    const sds::DeviceProfile profile = load_device_profile(cfg["profile"]);
    const bool frames_given = cmd.get_option("--frames")->count() > 0;
    sds::Agent agent(agent_config_of(cfg, kind, frames_given), profile.table);

    std::ofstream log_file;
    if (!o.log.empty()) {
        log_file.open(o.log);
        if (!log_file) throw std::runtime_error("cannot write training log: " + o.log);
    }
    std::ostream* log = o.log.empty() ? nullptr : &log_file;

    sds::TrainingSummary summary;
    if (o.listen) {
        sds::protocol::TcpListener listener(cfg["port"].get<std::uint16_t>());
        fmt::print(std::cerr, "waiting for a device on port {}\n", listener.port());
        auto channel = listener.accept();
        sds::protocol::RemoteDevice remote(*channel, profile.table, sds::LatencyConstraint(budget_of(cfg)));
        summary = sds::train(agent, remote, log, fs::path(o.out));
        remote.close();
    } else {
        auto device = sds::make_device(profile, cfg["dataset"], trace_of(cfg), budget_of(cfg),
                                       kind == sds::AgentKind::Sds ? 2 : 1, overhead_of(cfg),
                                       cfg["seed"].get<std::uint64_t>());
        summary = sds::train(agent, *device, log, fs::path(o.out));
    }
    if (!summary.aborted) agent.save(o.out);
    fmt::print("frames {} iterations {}{}\n", summary.frames, summary.iterations,
               summary.aborted ? " (aborted: " + summary.abort_reason + ")" : "");
    return summary.aborted ? 3 : 0;
}

int cmd_eval(const Options& o, const CLI::App& cmd) {
    const json cfg = resolve(o, cmd);
    const sds::DeviceProfile profile = load_device_profile(cfg["profile"]);
    std::optional<sds::Action> fixed;
    if (!o.fixed_levels.empty()) fixed = sds::Action{o.fixed_levels.at(0), o.fixed_levels.at(1)};
    std::optional<fs::path> checkpoint;
    if (!o.checkpoint.empty()) checkpoint = o.checkpoint;
    auto gov = sds::make_governor(o.governor, profile.table, checkpoint, fixed);

    sds::EvalConfig ec;
    ec.dataset = cfg["dataset"];
    ec.trace = trace_of(cfg);
    ec.budget_ms = budget_of(cfg);
    ec.frames = cfg["frames"];
    ec.seed = cfg["seed"];
    ec.overhead = overhead_of(cfg);
    ec.weights.alpha = cfg["objective"].value("alpha", ec.weights.alpha);
    ec.weights.beta = cfg["objective"].value("beta", ec.weights.beta);
    const sds::Scenario scenario = o.scenario.empty() ? sds::Scenario{} : sds::load_scenario(o.scenario);

    const sds::EvalResult result = sds::run_eval(*gov, profile, scenario, ec);
    sds::write_eval_outputs(result, o.out);
    const sds::NamedMetrics row{result.governor, result.metrics};
    fmt::print("{}", sds::report_table(std::span(&row, 1)));
    return 0;
}

int cmd_report(const Options& o) {
    std::vector<fs::path> inputs(o.inputs.begin(), o.inputs.end());
    fmt::print("{}", sds::report(inputs, o.out));
    return 0;
}

int cmd_serve_device(const Options& o, const CLI::App& cmd) {
    const json cfg = resolve(o, cmd);
    const std::string name = cfg["profile"];
    const sds::DeviceProfile profile = load_device_profile(name);
    auto device = sds::make_device(profile, cfg["dataset"], trace_of(cfg), budget_of(cfg), 2, overhead_of(cfg),
                                   cfg["seed"].get<std::uint64_t>());
    auto channel = sds::protocol::TcpChannel::connect(cfg["host"], cfg["port"].get<std::uint16_t>());
    const auto stats = sds::protocol::serve_device(*channel, *device, profile.name, cfg["frames"].get<long>());
    fmt::print("frames {}{}\n", stats.frames, stats.agent_ended ? " (agent hung up)" : "");
    return 0;
}

int cmd_serve_agent(const Options& o, const CLI::App& cmd) {
    const json cfg = resolve(o, cmd);
    auto agent = sds::Agent::load(o.checkpoint);
    sds::protocol::TcpListener listener(cfg["port"].get<std::uint16_t>());
    const sds::LatencyConstraint budget(budget_of(cfg));
    for (int s = 0; o.sessions <= 0 || s < o.sessions; ++s) {
        fmt::print(std::cerr, "listening on port {}\n", listener.port());
        auto channel = listener.accept();
        sds::LearnedGovernor gov(agent);
        try {
            const auto stats = sds::protocol::serve_agent(*channel, gov, budget);
            fmt::print("session {}: {} frames\n", s, stats.frames);
        } catch (const std::exception& e) {
            fmt::print(std::cerr, "session {} aborted: {}\n", s, e.what());
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage DVFS governor simulator and trainer"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config_path, "JSON config; flags override it")->check(CLI::ExistingFile);

    auto common = [&](CLI::App* c) {
        c->add_option("--profile", o.profile, "built-in profile name or profile JSON path");
        c->add_option("--dataset", o.dataset, "kitti-like | visdrone-like");
        c->add_option("--budget", o.budget_ms, "latency budget L in ms");
        c->add_option("--trace", o.trace, "proposal trace CSV instead of sampling");
        c->add_option("--frames", o.frames, "frame count");
        c->add_option("--seed", o.seed, "RNG seed");
    };

    auto* defaults = app.add_subcommand("defaults", "print the default config as JSON");

    auto* calibrate = app.add_subcommand("calibrate", "fit latency constants and check them");
    common(calibrate);
    calibrate->add_option("--out", o.out, "write the calibrated profile JSON here");

    auto* train = app.add_subcommand("train", "train an sds or ztt agent");
    common(train);
    train->add_option("--governor", o.governor, "sds | ztt")->required()->check(CLI::IsMember({"sds", "ztt"}));
    train->add_option("--out", o.out, "checkpoint path")->required();
    train->add_option("--log", o.log, "training log CSV");
    train->add_flag("--listen", o.listen, "train against a remote device connecting on --port");
    train->add_option("--port", o.port, "TCP port for --listen");

    auto* eval = app.add_subcommand("eval", "evaluate a governor on the simulator");
    common(eval);
    eval->add_option("--governor", o.governor, "fixed | ondemand | sds | ztt")
        ->required()
        ->check(CLI::IsMember({"fixed", "ondemand", "sds", "ztt"}));
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint for sds / ztt");
    eval->add_option("--levels", o.fixed_levels, "cpu and gpu level for fixed")->expected(2);
    eval->add_option("--scenario", o.scenario, "scenario JSON with timed events")->check(CLI::ExistingFile);
    eval->add_option("--out", o.out, "output directory")->required();

    auto* report = app.add_subcommand("report", "tabulate eval directories");
    report->add_option("--in", o.inputs, "eval output directories")->required();
    report->add_option("--out", o.out, "report directory")->required();

    auto* serve_device = app.add_subcommand("serve-device", "run a simulated device against a remote agent");
    common(serve_device);
    serve_device->add_option("--host", o.host, "agent host");
    serve_device->add_option("--port", o.port, "agent port");

    auto* serve_agent = app.add_subcommand("serve-agent", "serve a trained agent to devices over TCP");
    serve_agent->add_option("--checkpoint", o.checkpoint, "checkpoint")->required()->check(CLI::ExistingFile);
    serve_agent->add_option("--port", o.port, "listen port");
    serve_agent->add_option("--budget", o.budget_ms, "latency budget L in ms");
    serve_agent->add_option("--dataset", o.dataset, "dataset used for the default budget");
    serve_agent->add_option("--sessions", o.sessions, "stop after this many sessions (0 = forever)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*defaults) {
            fmt::print("{}\n", default_config().dump(2));
            return 0;
        }
        if (*calibrate) return cmd_calibrate(o, *calibrate);
        if (*train) return cmd_train(o, *train);
        if (*eval) return cmd_eval(o, *eval);
        if (*report) return cmd_report(o);
        if (*serve_device) return cmd_serve_device(o, *serve_device);
        if (*serve_agent) return cmd_serve_agent(o, *serve_agent);
    } catch (const std::exception& e) {
        fmt::print(std::cerr, "error: {}\n", e.what());
        return 2;
    }
    return 0;
}
