/**
 * @file error.hpp
 * @brief Library-wide exception type carrying a machine-readable code.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace poly {

/// Every failure raised by the library. `code()` is a stable identifier
/// such as "BadVlq" or "ShapeMismatch"; the CLI prints it as ERROR:<code>:.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace poly
