#pragma once

namespace dopf {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dopf
