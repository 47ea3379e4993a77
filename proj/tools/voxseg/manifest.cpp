#include "manifest.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include "voxseg/version.hpp"

namespace voxseg::cli {

ManifestWriter::ManifestWriter(std::string command)
    : command_(std::move(command)), started_(std::chrono::steady_clock::now()) {}

void ManifestWriter::write(const std::string& path) const {
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["seed"] = seed_;
    j["config"] = config_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    j["wall_clock_seconds"] = elapsed;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace voxseg::cli
