#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace voxseg::cli {

// Reproducibility record written beside every command's outputs: the fully
// resolved configuration, seed, paths, toolkit version and wall-clock time.
class ManifestWriter {
public:
    explicit ManifestWriter(std::string command);

    nlohmann::ordered_json& config() { return config_; }
    void add_input(const std::string& path) { inputs_.push_back(path); }
    void add_output(const std::string& path) { outputs_.push_back(path); }
    void set_seed(uint64_t seed) { seed_ = seed; }

    void write(const std::string& path) const;

private:
    std::string command_;
    nlohmann::ordered_json config_;
    std::vector<std::string> inputs_;
    std::vector<std::string> outputs_;
    uint64_t seed_ = 0;
    std::chrono::steady_clock::time_point started_;
};

}  // namespace voxseg::cli
