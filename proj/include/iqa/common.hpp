#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqa {

using Shape = std::vector<int64_t>;

// Base for every library error.
class IqaError : public std::runtime_error {
public:
  explicit IqaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatches, bad axes, bad layer configs.
class ShapeError : public IqaError {
public:
  explicit ShapeError(const std::string& msg) : IqaError(msg) {}
};

// Malformed manifests, files, checkpoints.
class DataError : public IqaError {
public:
  explicit DataError(const std::string& msg) : IqaError(msg) {}
};

// Non-finite values where finiteness is part of the contract.
class NumericError : public IqaError {
public:
  explicit NumericError(const std::string& msg) : IqaError(msg) {}
};

// Bad config keys/values, bad CLI usage.
class ConfigError : public IqaError {
public:
  explicit ConfigError(const std::string& msg) : IqaError(msg) {}
};

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

// Shortest round-trip decimal text for a double; keeps file outputs
// byte-stable across runs of the same binary.
inline std::string fmt_real(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_real(const std::string& s, const std::string& what) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError("not a number: '" + s + "' (" + what + ")");
  return v;
}

inline int64_t parse_int(const std::string& s, const std::string& what) {
  int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError("not an integer: '" + s + "' (" + what + ")");
  return v;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace iqa
