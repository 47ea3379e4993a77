#pragma once

namespace voxseg {
inline constexpr const char* kVersion = "0.1.0";
}
