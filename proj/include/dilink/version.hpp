#pragma once

namespace dilink {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dilink
