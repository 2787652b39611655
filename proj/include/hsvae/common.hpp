#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace hsvae {

// Bad arguments, shape mismatches, values outside a documented domain.
class ValueError : public std::invalid_argument {
 public:
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Non-finite values or numeric failures detected at runtime.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing, corrupt or mismatching data files.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void str_append(std::ostringstream&) {}

template <typename T, typename... Rest>
void str_append(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  str_append(os, rest...);
}

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream os;
  os.precision(17);
  str_append(os, args...);
  return os.str();
}

}  // namespace detail

}  // namespace hsvae
