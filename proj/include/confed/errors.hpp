#pragma once

#include <stdexcept>
#include <string>

namespace confed {

/// Invalid configuration or precondition on user-supplied parameters.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Iterative routine hit its cap or a retry budget ran out.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Iterates left the finite range; carries the round at which it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long round)
      : std::runtime_error(what), round_(round) {}
  long round() const noexcept { return round_; }

 private:
  long round_;
};

/// Malformed trace or companion file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace confed
