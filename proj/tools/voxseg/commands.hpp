#pragma once

#include <CLI11.hpp>

namespace voxseg::cli {

// Registers synth / preprocess / pretrain / train / predict / evaluate /
// compare on the application.
void register_commands(CLI::App& app);

}  // namespace voxseg::cli
