#pragma once

#include <stdexcept>
#include <string>

namespace snf {

// Bad input, shape mismatch, malformed file or config. The CLI maps this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values or divergence during evaluation or training. Exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace snf
