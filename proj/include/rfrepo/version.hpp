#pragma once

namespace rfrepo {

inline constexpr const char* kVersion = "0.1.0";

// Bumped whenever the binary model layout or a CSV schema changes.
inline constexpr int kModelFormatVersion = 1;
inline constexpr int kFileFormatVersion = 1;

}  // namespace rfrepo
