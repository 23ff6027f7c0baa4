#include "sds/agent.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>

namespace sds {

void ExplorationConfig::validate() const {
    if (!(eps_start >= eps_end && eps_end >= 0.0 && eps_start <= 1.0)) {
        throw DomainError("exploration: need 1 >= eps_start >= eps_end >= 0");
    }
    if (eps_decay_steps < 0) throw DomainError("exploration: eps_decay_steps must be non-negative");
    if (!(eps_t_init >= 0.0 && eps_t_init <= 1.0)) throw DomainError("exploration: eps_t_init must lie in [0, 1]");
    if (cooldown_horizon < 1) throw DomainError("exploration: cooldown_horizon must be positive");
}

double epsilon_at(const ExplorationConfig& cfg, std::int64_t decisions) {
    if (cfg.eps_decay_steps == 0 || decisions >= cfg.eps_decay_steps) return cfg.eps_end;
    const double frac = static_cast<double>(decisions) / static_cast<double>(cfg.eps_decay_steps);
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac;
}

double cooldown_epsilon(const ExplorationConfig& cfg, std::int64_t triggers) {
    if (triggers >= cfg.cooldown_horizon) return 0.0;
    const double frac = static_cast<double>(std::max<std::int64_t>(triggers, 0)) /
                        static_cast<double>(cfg.cooldown_horizon);
    return cfg.eps_t_init * std::cos(std::numbers::pi / 2.0 * frac);
}

bool overheated(const Observation& obs, const ThermalConfig& thermal) {
    return obs.cpu_temp > thermal.threshold_c || obs.gpu_temp > thermal.threshold_c;
}

Action random_lower_action(const Observation& obs, const FrequencyTable& table, Rng& rng) {
    const std::size_t cpu = std::min(obs.cpu_level, table.cpu_count() - 1);
    const std::size_t gpu = std::min(obs.gpu_level, table.gpu_count() - 1);
    // (cpu + 1)(gpu + 1) pairs are component-wise <= current; drop the current pair itself.
    const std::size_t candidates = (cpu + 1) * (gpu + 1) - 1;
    if (candidates == 0) return {cpu, gpu};
    std::uniform_int_distribution<std::size_t> pick(0, candidates - 1);
    const std::size_t k = pick(rng);
    return {k / (gpu + 1), k % (gpu + 1)};
}

std::size_t greedy_index(const Eigen::VectorXd& q_values) {
    if (q_values.size() == 0) throw DomainError("empty Q-value vector");
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < q_values.size(); ++i) {
        if (q_values(i) > q_values(best)) best = i;
    }
    return static_cast<std::size_t>(best);
}

Selection select_action(const Eigen::VectorXd& q_values, const Observation& obs, const FrequencyTable& table,
                        const ThermalConfig& thermal, double epsilon, double cooldown_probability, Rng& rng) {
    if (static_cast<std::size_t>(q_values.size()) != table.action_count()) {
        throw DomainError("Q-value count does not match the action space");
    }
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (overheated(obs, thermal) && cooldown_probability > 0.0 && coin(rng) < cooldown_probability) {
        return {random_lower_action(obs, table, rng), true, false};
    }
    if (epsilon > 0.0 && coin(rng) < epsilon) {
        std::uniform_int_distribution<std::size_t> pick(0, table.action_count() - 1);
        return {index_to_action(pick(rng), table), false, true};
    }
    return {index_to_action(greedy_index(q_values), table), false, false};
}

Selection select_action(const Eigen::VectorXd& q_values, const Observation& obs, const FrequencyTable& table,
                        const ThermalConfig& thermal, const ExplorationConfig& expl, double epsilon, Rng& rng,
                        std::int64_t& cooldown_counter) {
    const Selection s =
        select_action(q_values, obs, table, thermal, epsilon, cooldown_epsilon(expl, cooldown_counter), rng);
    if (s.cooled_down) ++cooldown_counter;
    return s;
}

DualReplayBuffer::DualReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw DomainError("replay capacity must be positive");
}

void DualReplayBuffer::push(Transition t) {
    auto& buf = t.parity() == Parity::Even ? even_ : odd_;
    if (buf.size() == capacity_) buf.pop_front();
    buf.push_back(std::move(t));
}

std::vector<const Transition*> DualReplayBuffer::sample(Parity p, std::size_t count, Rng& rng) const {
    const auto& buf = buffer(p);
    if (buf.empty()) throw DomainError("cannot sample from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> pick(0, buf.size() - 1);
    std::vector<const Transition*> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(&buf[pick(rng)]);
    return out;
}

void push_frame(DualReplayBuffer& buffers, const Observation& s0, const Action& a0, double r0, const Observation& s1,
                const Action& a1, double r1, const Observation& s2) {
    if (s0.stage != Stage::FrameStart || s1.stage != Stage::AfterRpn || s2.stage != Stage::FrameStart) {
        throw DomainError("push_frame: states out of parity order");
    }
    Transition even(s0, a0, r0, s1, Parity::Even);
    Transition odd(s1, a1, r1, s2, Parity::Odd);
    buffers.push(std::move(even));
    buffers.push(std::move(odd));
}

std::string to_string(AgentKind kind) { return kind == AgentKind::Sds ? "sds" : "ztt"; }

AgentKind agent_kind_from_string(const std::string& name) {
    if (name == "sds") return AgentKind::Sds;
    if (name == "ztt") return AgentKind::Ztt;
    throw DomainError("unknown agent kind: " + name);
}

MlpShape network_shape(AgentKind kind, const FrequencyTable& table, Eigen::Index hidden, double narrow_ratio) {
    const auto outputs = static_cast<Eigen::Index>(table.action_count());
    if (kind == AgentKind::Sds) return {7, hidden, outputs, 6, narrow_ratio};
    return {6, hidden, outputs, 6, narrow_ratio};
}

QInput q_input(AgentKind kind, const Observation& obs, const FrequencyTable& table,
               const LatencyConstraint& constraint, double p_max) {
    const Features f = normalize_observation(obs, table, constraint, p_max);
    if (kind == AgentKind::Sds) {
        return {Eigen::VectorXd(f), obs.stage == Stage::FrameStart ? Width::Narrow : Width::Full};
    }
    return {Eigen::VectorXd(f.head<6>()), Width::Full};
}

double td_target(const Transition& t, const QNetwork& target, double gamma, AgentKind kind,
                 const FrequencyTable& table, const LatencyConstraint& constraint, double p_max) {
    if (gamma == 0.0) return t.reward();
    const QInput in = q_input(kind, t.next_state(), table, constraint, p_max);
    return t.reward() + gamma * forward(target, in.features, in.width).maxCoeff();
}

void AgentConfig::validate() const {
    exploration.validate();
    reward.validate();
    thermal.validate();
    if (batch_size == 0) throw DomainError("batch_size must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("gamma must lie in [0, 1)");
    if (target_update_every < 1) throw DomainError("target_update_every must be positive");
    if (!(p_max > 0.0)) throw DomainError("p_max must be positive");
    if (iterations < 0 || max_frames < 0) throw DomainError("iterations and frames must be non-negative");
}

nlohmann::json to_json(const AgentConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"iterations", c.iterations},
            {"max_frames", c.max_frames},
            {"batch_size", c.batch_size},
            {"warmup", c.warmup},
            {"buffer_capacity", c.buffer_capacity},
            {"target_update_every", c.target_update_every},
            {"gamma", c.gamma},
            {"p_max", c.p_max},
            {"hidden", c.hidden},
            {"narrow_ratio", c.narrow_ratio},
            {"base_lr", c.base_lr},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"ztt_cooldown_probability", c.ztt_cooldown_probability},
            {"exploration",
             {{"eps_start", c.exploration.eps_start},
              {"eps_end", c.exploration.eps_end},
              {"eps_decay_steps", c.exploration.eps_decay_steps},
              {"eps_t_init", c.exploration.eps_t_init},
              {"cooldown_horizon", c.exploration.cooldown_horizon}}},
            {"reward",
             {{"lambda", c.reward.lambda}, {"penalty_p", c.reward.penalty_p}, {"window_n", c.reward.window_n}}},
            {"thermal",
             {{"threshold_c", c.thermal.threshold_c},
              {"throttle_c", c.thermal.throttle_c},
              {"hysteresis_c", c.thermal.hysteresis_c}}},
            {"seed", c.seed}};
}

AgentConfig agent_config_from_json(const nlohmann::json& j, AgentConfig c) {
    const auto read = [](const nlohmann::json& obj, const char* key, auto& field) {
        if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("kind")) c.kind = agent_kind_from_string(j.at("kind").get<std::string>());
    read(j, "iterations", c.iterations);
    read(j, "max_frames", c.max_frames);
    read(j, "batch_size", c.batch_size);
    read(j, "warmup", c.warmup);
    read(j, "buffer_capacity", c.buffer_capacity);
    read(j, "target_update_every", c.target_update_every);
    read(j, "gamma", c.gamma);
    read(j, "p_max", c.p_max);
    read(j, "hidden", c.hidden);
    read(j, "narrow_ratio", c.narrow_ratio);
    read(j, "base_lr", c.base_lr);
    read(j, "beta1", c.beta1);
    read(j, "beta2", c.beta2);
    read(j, "ztt_cooldown_probability", c.ztt_cooldown_probability);
    read(j, "seed", c.seed);
    if (j.contains("exploration")) {
        const auto& e = j.at("exploration");
        read(e, "eps_start", c.exploration.eps_start);
        read(e, "eps_end", c.exploration.eps_end);
        read(e, "eps_decay_steps", c.exploration.eps_decay_steps);
        read(e, "eps_t_init", c.exploration.eps_t_init);
        read(e, "cooldown_horizon", c.exploration.cooldown_horizon);
    }
    if (j.contains("reward")) {
        const auto& r = j.at("reward");
        read(r, "lambda", c.reward.lambda);
        read(r, "penalty_p", c.reward.penalty_p);
        read(r, "window_n", c.reward.window_n);
    }
    if (j.contains("thermal")) {
        const auto& t = j.at("thermal");
        read(t, "threshold_c", c.thermal.threshold_c);
        read(t, "throttle_c", c.thermal.throttle_c);
        read(t, "hysteresis_c", c.thermal.hysteresis_c);
    }
    c.validate();
    return c;
}

Agent::Agent(AgentConfig cfg, FrequencyTable table)
    : cfg_(std::move(cfg)),
      table_(std::move(table)),
      net_(kaiming_uniform<double>(network_shape(cfg_.kind, table_, cfg_.hidden, cfg_.narrow_ratio), cfg_.seed)),
      target_(net_),
      opt_(QOptimizer::for_network(net_, cfg_.iterations)),
      replay_(cfg_.buffer_capacity),
      rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ull) {
    cfg_.validate();
    opt_.base_lr = cfg_.base_lr;
    opt_.beta1 = cfg_.beta1;
    opt_.beta2 = cfg_.beta2;
}

double Agent::cooldown_probability() const {
    if (cfg_.kind == AgentKind::Ztt) return cfg_.ztt_cooldown_probability;
    return cooldown_epsilon(cfg_.exploration, cooldown_counter_);
}

Eigen::VectorXd Agent::q_values(const Observation& obs, const LatencyConstraint& constraint) const {
    const QInput in = q_input(cfg_.kind, obs, table_, constraint, cfg_.p_max);
    return forward(net_, in.features, in.width);
}

Selection Agent::select(const Observation& obs, const LatencyConstraint& constraint, double epsilon) {
    const Eigen::VectorXd q = q_values(obs, constraint);
    if (cfg_.kind == AgentKind::Ztt) {
        return select_action(q, obs, table_, cfg_.thermal, epsilon, cfg_.ztt_cooldown_probability, rng_);
    }
    return select_action(q, obs, table_, cfg_.thermal, cfg_.exploration, epsilon, rng_, cooldown_counter_);
}

Selection Agent::explore(const Observation& obs, const LatencyConstraint& constraint) {
    const Selection s = select(obs, constraint, epsilon());
    ++decisions_;
    return s;
}

Selection Agent::exploit(const Observation& obs, const LatencyConstraint& constraint) {
    return select(obs, constraint, 0.0);
}

TdBatch<double> Agent::make_batch(const std::vector<const Transition*>& sample,
                                  const LatencyConstraint& constraint) const {
    const auto n = static_cast<Eigen::Index>(sample.size());
    TdBatch<double> batch{Eigen::MatrixXd(net_.shape.inputs, n), std::vector<Eigen::Index>(sample.size()),
                          Eigen::VectorXd(n)};
    // Next states of one parity share a stage, but group by width anyway so each forward is batched.
    Eigen::MatrixXd next_narrow(net_.shape.inputs, n);
    Eigen::MatrixXd next_full(net_.shape.inputs, n);
    std::vector<Eigen::Index> narrow_cols;
    std::vector<Eigen::Index> full_cols;
    for (Eigen::Index b = 0; b < n; ++b) {
        const Transition& t = *sample[static_cast<std::size_t>(b)];
        batch.inputs.col(b) = q_input(cfg_.kind, t.state(), table_, constraint, cfg_.p_max).features;
        batch.actions[static_cast<std::size_t>(b)] = static_cast<Eigen::Index>(action_to_index(t.action(), table_));
        const QInput next = q_input(cfg_.kind, t.next_state(), table_, constraint, cfg_.p_max);
        if (next.width == Width::Narrow) {
            next_narrow.col(static_cast<Eigen::Index>(narrow_cols.size())) = next.features;
            narrow_cols.push_back(b);
        } else {
            next_full.col(static_cast<Eigen::Index>(full_cols.size())) = next.features;
            full_cols.push_back(b);
        }
    }
    const auto fill = [&](const Eigen::MatrixXd& inputs, const std::vector<Eigen::Index>& cols, Width width) {
        if (cols.empty()) return;
        const auto k = static_cast<Eigen::Index>(cols.size());
        const Eigen::MatrixXd q = forward(target_, inputs.leftCols(k), width);
        for (Eigen::Index i = 0; i < k; ++i) {
            const Transition& t = *sample[static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])];
            batch.targets(cols[static_cast<std::size_t>(i)]) = t.reward() + cfg_.gamma * q.col(i).maxCoeff();
        }
    };
    fill(next_narrow, narrow_cols, Width::Narrow);
    fill(next_full, full_cols, Width::Full);
    return batch;
}

std::optional<double> Agent::train_step(Parity parity, const LatencyConstraint& constraint) {
    if (iterations_ >= cfg_.iterations) return std::nullopt;
    const std::size_t available = replay_.size(parity);
    if (available < cfg_.warmup || available < cfg_.batch_size) return std::nullopt;

    const auto sample = replay_.sample(parity, cfg_.batch_size, rng_);
    const TdBatch<double> batch = make_batch(sample, constraint);
    // Each parity trains the width it is evaluated at; the baseline has only one.
    const Width width = (cfg_.kind == AgentKind::Sds && parity == Parity::Even) ? Width::Narrow : Width::Full;
    const auto lg = backward(net_, batch, width);
    adam_step(net_, lg.gradient, opt_, width);
    ++iterations_;
    if (iterations_ % cfg_.target_update_every == 0) hard_update(target_, net_);
    return lg.loss;
}

nlohmann::json Agent::to_checkpoint() const {
    nlohmann::json doc;
    doc["format"] = "sds-checkpoint";
    doc["version"] = 1;
    doc["config"] = to_json(cfg_);
    doc["cpu_levels_mhz"] = table_.cpu_levels();
    doc["gpu_levels_mhz"] = table_.gpu_levels();
    doc["network"] = to_json(net_);
    doc["target"] = to_json(target_);
    doc["optimizer"] = {{"step", opt_.step},
                        {"beta1", opt_.beta1},
                        {"beta2", opt_.beta2},
                        {"base_lr", opt_.base_lr},
                        {"epsilon", opt_.epsilon},
                        {"total_steps", opt_.total_steps},
                        {"first_moment", to_json(opt_.first_moment)},
                        {"second_moment", to_json(opt_.second_moment)}};
    doc["iterations"] = iterations_;
    doc["decisions"] = decisions_;
    doc["cooldown_counter"] = cooldown_counter_;
    return doc;
}

Agent Agent::from_checkpoint(const nlohmann::json& doc) {
    try {
        if (doc.at("format").get<std::string>() != "sds-checkpoint") throw DomainError("not an agent checkpoint");
        Agent agent(agent_config_from_json(doc.at("config")),
                    FrequencyTable(doc.at("cpu_levels_mhz").get<std::vector<double>>(),
                                   doc.at("gpu_levels_mhz").get<std::vector<double>>()));
        agent.net_ = mlp_from_json<double>(doc.at("network"));
        agent.target_ = mlp_from_json<double>(doc.at("target"));
        const auto& o = doc.at("optimizer");
        agent.opt_.step = o.at("step").get<std::int64_t>();
        agent.opt_.beta1 = o.at("beta1").get<double>();
        agent.opt_.beta2 = o.at("beta2").get<double>();
        agent.opt_.base_lr = o.at("base_lr").get<double>();
        agent.opt_.epsilon = o.at("epsilon").get<double>();
        agent.opt_.total_steps = o.at("total_steps").get<std::int64_t>();
        agent.opt_.first_moment = mlp_from_json<double>(o.at("first_moment"));
        agent.opt_.second_moment = mlp_from_json<double>(o.at("second_moment"));
        agent.iterations_ = doc.at("iterations").get<std::int64_t>();
        agent.decisions_ = doc.at("decisions").get<std::int64_t>();
        agent.cooldown_counter_ = doc.at("cooldown_counter").get<std::int64_t>();
        if (!(agent.net_.shape == network_shape(agent.cfg_.kind, agent.table_, agent.cfg_.hidden,
                                                 agent.cfg_.narrow_ratio))) {
            throw DomainError("checkpoint network shape does not match its configuration");
        }
        return agent;
    } catch (const nlohmann::json::exception& e) {
        throw DomainError(std::string("malformed checkpoint: ") + e.what());
    }
}

void Agent::save(const std::filesystem::path& path) const {
    // Write-then-rename so a reader never sees a partial checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint: " + tmp.string());
        out << to_checkpoint().dump();
        if (!out.flush()) throw std::runtime_error("failed writing checkpoint: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Agent Agent::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    return from_checkpoint(nlohmann::json::parse(in));
}

std::string format_log_row(const FrameLogRow& r) {
    const FrameTrace& t = r.trace;
    return fmt::format("{},{:.4f},{:.4f},{:.4f},{},{:.4f},{:.4f},{},{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}", r.frame,
                       t.stage1_ms, t.stage2_ms, t.total_ms, t.proposals, t.cpu_temp, t.gpu_temp, t.first.cpu_level,
                       t.first.gpu_level, t.second.cpu_level, t.second.gpu_level, r.reward_even, r.reward_odd, r.eps,
                       r.eps_t);
}

FrameRewards frame_rewards(const FrameTrace& trace, const Observation& after_rpn, const Observation& next_start,
                           const SlackWindow& window, const RewardConfig& reward, const ThermalConfig& thermal,
                           const LatencyConstraint& constraint) {
    const double slack = constraint.budget_ms - trace.total_ms;
    const double sigma = window.sigma();
    return {combined_reward(slack, sigma, after_rpn.cpu_temp, after_rpn.gpu_temp, reward, thermal, constraint),
            combined_reward(slack, sigma, next_start.cpu_temp, next_start.gpu_temp, reward, thermal, constraint)};
}

TrainingSummary train(Agent& agent, DeviceEnvironment& env, std::ostream* log,
                      const std::optional<std::filesystem::path>& abort_checkpoint) {
    const AgentConfig& cfg = agent.config();
    TrainingSummary summary;
    SlackWindow window(cfg.reward.window_n);
    if (log != nullptr) *log << kTrainingLogHeader << '\n';

    const auto done = [&] {
        return agent.iterations() >= cfg.iterations || summary.frames >= cfg.max_frames;
    };
    if (done()) {
        summary.iterations = agent.iterations();
        return summary;
    }

    try {
        Observation s0 = env.frame_start();
        while (true) {
            const LatencyConstraint budget = env.budget();
            const double eps = agent.epsilon();
            const double eps_t = agent.cooldown_probability();

            const Selection first = agent.explore(s0, budget);
            const Observation s1 = env.after_rpn(first.action);
            const Action second = cfg.kind == AgentKind::Sds ? agent.explore(s1, budget).action : first.action;
            const FrameTrace trace = env.finish_frame(second);
            ++summary.frames;
            const Observation s2 = env.frame_start();

            window.push(budget.budget_ms - trace.total_ms);
            FrameRewards r{};
            if (cfg.kind == AgentKind::Sds) {
                r = frame_rewards(trace, s1, s2, window, cfg.reward, cfg.thermal, budget);
                push_frame(agent.replay(), s0, first.action, r.even, s1, second, r.odd, s2);
                agent.train_step(Parity::Even, budget);
                agent.train_step(Parity::Odd, budget);
            } else {
                // One decision per frame: the transition spans the whole frame.
                r.even = combined_reward(budget.budget_ms - trace.total_ms, window.sigma(), s2.cpu_temp, s2.gpu_temp,
                                         cfg.reward, cfg.thermal, budget);
                agent.replay().push(Transition(s0, first.action, r.even, s2, Parity::Even));
                agent.train_step(Parity::Even, budget);
                agent.train_step(Parity::Even, budget);
            }
            summary.frame_rewards.push_back(r.even + r.odd);
            if (log != nullptr) {
                *log << format_log_row({summary.frames - 1, trace, r.even, r.odd, eps, eps_t}) << '\n';
            }
            s0 = s2;
            if (done()) break;
        }
    } catch (const EnvironmentEnded&) {
        // Nothing to recover: the last frame simply has no successor state.
    } catch (const EnvironmentClosed& e) {
        summary.aborted = true;
        summary.abort_reason = e.what();
        if (abort_checkpoint) agent.save(*abort_checkpoint);
    }
    summary.iterations = agent.iterations();
    return summary;
}

}  // namespace sds
