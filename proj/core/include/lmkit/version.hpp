#pragma once

#include <string_view>

namespace lmkit {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr int kReportSchemaVersion = 1;

}  // namespace lmkit
