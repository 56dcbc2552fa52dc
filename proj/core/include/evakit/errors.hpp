#pragma once

#include <stdexcept>
#include <string>

namespace evakit {

// Malformed or inconsistent configuration (window/chunk constraints, bad
// proposal parameters, unknown kinds). The CLI maps this to exit status 2.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Shape mismatches and other caller errors on otherwise valid configs.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Non-finite inputs, all-masked rows, weight underflow, diverging training.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace evakit
