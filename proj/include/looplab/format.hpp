#pragma once

#include <string>

namespace looplab {

/// Shortest-safe decimal: 17 significant digits, so parsing returns the same double.
std::string fmt17(double v);

}  // namespace looplab
