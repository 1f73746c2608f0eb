#pragma once

namespace occuray {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace occuray
