#include "sds/workload.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

namespace sds {

void DatasetProfile::validate() const {
    if (!(log_sigma > 0.0)) throw std::invalid_argument("dataset profile log_sigma must be positive");
    if (p_cap < 1) throw std::invalid_argument("dataset profile p_cap must be at least 1");
}

DatasetProfile dataset_profile(const std::string& name) {
    // Modeling assumptions: VisDrone frames carry many small objects, hence more proposals.
    if (name == "kitti-like") return {"kitti-like", std::log(150.0), 0.8, 1000};
    if (name == "visdrone-like") return {"visdrone-like", std::log(400.0), 0.6, 1000};
    throw std::invalid_argument("unknown dataset profile: " + name);
}

std::vector<std::string> dataset_profile_names() { return {"kitti-like", "visdrone-like"}; }

FrameWorkload sample_workload(const DatasetProfile& profile, Rng& rng, long frame_id) {
    std::lognormal_distribution<double> dist(profile.log_mean, profile.log_sigma);
    const double draw = dist(rng);
    const long p = std::min(static_cast<long>(std::llround(draw)), profile.p_cap);
    return {frame_id, p};
}

TraceParseError::TraceParseError(const std::string& what, std::size_t line)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

namespace {

long parse_long(std::string_view field, std::size_t line) {
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
        field.remove_suffix(1);
    }
    long value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size()) {
        throw TraceParseError("expected an integer, got '" + std::string(field) + "'", line);
    }
    return value;
}

}  // namespace

std::vector<FrameWorkload> parse_trace(std::istream& in) {
    std::string row;
    if (!std::getline(in, row)) throw TraceParseError("missing header", 1);
    if (!row.empty() && row.back() == '\r') row.pop_back();
    if (row != "frame_id,proposals") throw TraceParseError("expected header 'frame_id,proposals'", 1);

    std::vector<FrameWorkload> frames;
    std::size_t line = 1;
    while (std::getline(in, row)) {
        ++line;
        if (row.empty() || row == "\r") continue;
        const auto comma = row.find(',');
        if (comma == std::string::npos || row.find(',', comma + 1) != std::string::npos) {
            throw TraceParseError("expected two comma-separated fields", line);
        }
        const std::string_view view(row);
        FrameWorkload fw{parse_long(view.substr(0, comma), line), parse_long(view.substr(comma + 1), line)};
        if (fw.proposals < 0) throw TraceParseError("negative proposal count", line);
        frames.push_back(fw);
    }
    return frames;
}

std::vector<FrameWorkload> load_trace(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace file: " + path.string());
    return parse_trace(in);
}

void write_trace(std::ostream& out, const std::vector<FrameWorkload>& frames) {
    out << "frame_id,proposals\n";
    for (const auto& f : frames) out << f.frame_id << ',' << f.proposals << '\n';
}

void save_trace(const std::filesystem::path& path, const std::vector<FrameWorkload>& frames) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace file: " + path.string());
    write_trace(out, frames);
}

}  // namespace sds
