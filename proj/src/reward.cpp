#include "sds/reward.hpp"

#include <cmath>

namespace sds {

SlackWindow::SlackWindow(std::size_t capacity) : capacity_(capacity) {
    if (capacity < 2) throw DomainError("slack window capacity must be at least 2");
}

void SlackWindow::push(double slack_ms) {
    if (values_.size() == capacity_) values_.pop_front();
    values_.push_back(slack_ms);
}

double SlackWindow::sigma() const {
    if (values_.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : values_) mean += v;
    mean /= static_cast<double>(values_.size());
    double ss = 0.0;
    for (double v : values_) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / static_cast<double>(values_.size()));
}

double time_reward(double slack_ms, double sigma_ms, double penalty_p, const LatencyConstraint& constraint) {
    const double slack = slack_ms / constraint.budget_ms;
    if (slack > 0.0) {
        const double sigma = sigma_ms / constraint.budget_ms;
        return std::tanh(slack) + 1.0 / (1.0 + sigma);
    }
    return penalty_p * slack;
}

double temp_reward(double cpu_temp, double gpu_temp, double threshold_c, double penalty_p) {
    return (cpu_temp <= threshold_c && gpu_temp <= threshold_c) ? 1.0 : -penalty_p;
}

double combined_reward(double slack_ms, double sigma_ms, double cpu_temp, double gpu_temp,
                       const RewardConfig& cfg, const ThermalConfig& thermal, const LatencyConstraint& constraint) {
    return time_reward(slack_ms, sigma_ms, cfg.penalty_p, constraint) +
           cfg.lambda * temp_reward(cpu_temp, gpu_temp, thermal.threshold_c, cfg.penalty_p);
}

}  // namespace sds
