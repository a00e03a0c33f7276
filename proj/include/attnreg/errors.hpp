#pragma once

#include <stdexcept>

namespace attnreg {

// Invalid user-facing input: configuration, prompt or flag values. The CLI
// maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace attnreg
