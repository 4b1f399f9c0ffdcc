#pragma once

#define DQRELO_VERSION_MAJOR 0
#define DQRELO_VERSION_MINOR 1
#define DQRELO_VERSION_PATCH 0

namespace dqrelo {

inline constexpr const char* kVersionString = "0.1.0";
inline constexpr const char* kToolName = "dqrelo";

}  // namespace dqrelo
