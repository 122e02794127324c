#pragma once

#include <stdexcept>
#include <string>

namespace wgqa {

// Shape disagreement between tensors; the message names both shapes.
class DimensionError : public std::runtime_error {
  public:
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// NaN or Inf reached an operation that requires finite values.
class NumericError : public std::runtime_error {
  public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid geometry or option combination.
class ConfigError : public std::invalid_argument {
  public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// Checkpoint container faults, one kind per loader failure mode.
enum class FormatFault {
    BadMagic,
    BadVersion,
    Truncated,
    Malformed,
    Inconsistent,
};

class FormatError : public std::runtime_error {
  public:
    FormatError(FormatFault fault, const std::string& what)
        : std::runtime_error(what), fault_(fault) {}
    FormatFault fault() const { return fault_; }

  private:
    FormatFault fault_;
};

}  // namespace wgqa
