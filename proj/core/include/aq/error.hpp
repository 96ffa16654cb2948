#pragma once

#include <stdexcept>
#include <string>

namespace aq {

// Caller broke a contract: bad shapes, malformed files, out-of-range labels.
// The CLI maps this family to exit code 2.
class InputError : public std::runtime_error {
public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation went numerically bad (non-finite loss, singular solve).
// The CLI maps this family to exit code 3.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace aq
