#pragma once

#include <stdexcept>
#include <string>

namespace weightlab {

// Contract violation: bad arguments, malformed files, mismatched shapes.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// The filesystem failed underneath a structurally valid request.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace weightlab
