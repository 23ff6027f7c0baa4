#pragma once

#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sds {

using Rng = std::mt19937_64;

struct FrameWorkload {
    long frame_id = 0;
    long proposals = 0;

    bool operator==(const FrameWorkload&) const = default;
};

/// Log-normal proposal-count distribution, truncated at p_cap.
struct DatasetProfile {
    std::string name;
    double log_mean = 0.0;
    double log_sigma = 1.0;
    long p_cap = 1000;

    void validate() const;
};

/// "kitti-like" and "visdrone-like". Throws std::invalid_argument for unknown names.
DatasetProfile dataset_profile(const std::string& name);
std::vector<std::string> dataset_profile_names();

/// P = min(round(lognormal(log_mean, log_sigma)), p_cap).
FrameWorkload sample_workload(const DatasetProfile& profile, Rng& rng, long frame_id = 0);

class TraceParseError : public std::runtime_error {
public:
    TraceParseError(const std::string& what, std::size_t line);
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// CSV with header "frame_id,proposals". Line numbers in errors are 1-based and count the header.
std::vector<FrameWorkload> parse_trace(std::istream& in);
std::vector<FrameWorkload> load_trace(const std::filesystem::path& path);
void write_trace(std::ostream& out, const std::vector<FrameWorkload>& frames);
void save_trace(const std::filesystem::path& path, const std::vector<FrameWorkload>& frames);

}  // namespace sds
