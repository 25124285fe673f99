#pragma once

namespace stemfold {

inline constexpr const char* kCodeVersion = "0.1.0";

}  // namespace stemfold
