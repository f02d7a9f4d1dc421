#pragma once

namespace lfsum {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace lfsum
