#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace avss::detail {

// Fixed key order (insertion order), floats as "%.17g", two-space indent,
// scalar arrays on one line, trailing newline.
std::string canonical_json(const nlohmann::ordered_json& j);

}  // namespace avss::detail
