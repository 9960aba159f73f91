#pragma once

#include <functional>
#include <string>

namespace tristream {

using WarningSink = std::function<void(const std::string&)>;

// Replaces the process-wide warning sink; an empty sink restores stderr.
// Returns the previous sink.
WarningSink set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace tristream
