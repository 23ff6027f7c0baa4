#pragma once

#include "sds/core_model.hpp"

#include <cstddef>
#include <deque>

namespace sds {

/// Rolling window of the most recent per-frame slack values (ms).
class SlackWindow {
public:
    explicit SlackWindow(std::size_t capacity);

    void push(double slack_ms);
    /// Population standard deviation of the current contents; 0 with fewer than two entries.
    double sigma() const;

    std::size_t size() const noexcept { return values_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    void clear() noexcept { values_.clear(); }

private:
    std::size_t capacity_;
    std::deque<double> values_;
};

// Slack and sigma are normalized by the latency budget before the tanh / reciprocal terms
// (tanh of raw milliseconds would saturate on the first millisecond).

/// tanh(slack/L) + 1/(1 + sigma/L) when slack > 0, otherwise p * slack/L.
double time_reward(double slack_ms, double sigma_ms, double penalty_p, const LatencyConstraint& constraint);

/// 1 when both temperatures are at or below the threshold, -p otherwise.
double temp_reward(double cpu_temp, double gpu_temp, double threshold_c, double penalty_p);

double combined_reward(double slack_ms, double sigma_ms, double cpu_temp, double gpu_temp,
                       const RewardConfig& cfg, const ThermalConfig& thermal, const LatencyConstraint& constraint);

}  // namespace sds
