#include "sds/core_model.hpp"

#include <cmath>
#include <string>

namespace sds {

namespace {

void check_levels(const std::vector<double>& levels, const char* name) {
    if (levels.size() < 2) {
        throw DomainError(std::string(name) + ": at least two frequency levels required");
    }
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (!(levels[i] > 0.0) || !std::isfinite(levels[i])) {
            throw DomainError(std::string(name) + ": frequencies must be positive");
        }
        if (i > 0 && !(levels[i] > levels[i - 1])) {
            throw DomainError(std::string(name) + ": frequencies must be strictly increasing");
        }
    }
}

}  // namespace

FrequencyTable::FrequencyTable(std::vector<double> cpu_levels_mhz, std::vector<double> gpu_levels_mhz)
    : cpu_levels_(std::move(cpu_levels_mhz)), gpu_levels_(std::move(gpu_levels_mhz)) {
    check_levels(cpu_levels_, "cpu_levels");
    check_levels(gpu_levels_, "gpu_levels");
}

void validate(const Observation& obs) {
    if (!std::isfinite(obs.cpu_temp) || !std::isfinite(obs.gpu_temp)) {
        throw DomainError("observation temperatures must be finite");
    }
    if (!std::isfinite(obs.slack_ms)) {
        throw DomainError("observation slack must be finite");
    }
    const bool after_rpn = obs.stage == Stage::AfterRpn;
    if (after_rpn != obs.proposals.has_value()) {
        throw DomainError("proposals must be present exactly when stage is AfterRpn");
    }
    if (obs.proposals && *obs.proposals < 0) {
        throw DomainError("proposal count must be non-negative");
    }
}

LatencyConstraint::LatencyConstraint(double budget) : budget_ms(budget) {
    if (!(budget > 0.0) || !std::isfinite(budget)) {
        throw DomainError("latency budget must be positive");
    }
}

void ThermalConfig::validate() const {
    if (!(threshold_c < throttle_c)) throw DomainError("threshold_c must be below throttle_c");
    if (!(hysteresis_c > 0.0)) throw DomainError("hysteresis_c must be positive");
}

void RewardConfig::validate() const {
    if (!(lambda >= 0.0)) throw DomainError("lambda must be non-negative");
    if (!(penalty_p > 0.0)) throw DomainError("penalty_p must be positive");
    if (window_n < 2) throw DomainError("window_n must be at least 2");
}

void ObjectiveWeights::validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw DomainError("objective weights must be non-negative");
}

Transition::Transition(Observation state, Action action, double reward, Observation next_state, Parity parity)
    : state_(std::move(state)), action_(action), reward_(reward), next_state_(std::move(next_state)), parity_(parity) {
    if (parity_of(state_.stage) != parity_) {
        throw DomainError("transition parity does not match the stage of its state");
    }
}

std::size_t action_to_index(const Action& a, const FrequencyTable& table) {
    if (a.cpu_level >= table.cpu_count() || a.gpu_level >= table.gpu_count()) {
        throw DomainError("action level out of table bounds");
    }
    return a.cpu_level * table.gpu_count() + a.gpu_level;
}

Action index_to_action(std::size_t index, const FrequencyTable& table) {
    if (index >= table.action_count()) {
        throw DomainError("action index out of range");
    }
    return {index / table.gpu_count(), index % table.gpu_count()};
}

Features normalize_observation(const Observation& obs, const FrequencyTable& table,
                               const LatencyConstraint& constraint, double p_max) {
    Features f;
    f << (obs.stage == Stage::AfterRpn ? 1.0 : 0.0),
        obs.cpu_temp / 100.0,
        obs.gpu_temp / 100.0,
        static_cast<double>(obs.cpu_level) / static_cast<double>(table.cpu_count() - 1),
        static_cast<double>(obs.gpu_level) / static_cast<double>(table.gpu_count() - 1),
        obs.slack_ms / constraint.budget_ms,
        obs.proposals ? static_cast<double>(*obs.proposals) / p_max : 0.0;
    return f;
}

}  // namespace sds
