#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace labelreg {

// Bad architecture/config wiring: shape mismatches, invalid presets, malformed configs.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad input data: out-of-range label ids, malformed dataset files.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: backward on a foreign tensor, missing gradients in an optimizer step.
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

// Label id marking pixels excluded from every loss and metric.
inline constexpr int kVoidId = 255;

struct TensorShape {
  int n = 0;  // batch
  int c = 0;  // channels
  int h = 0;  // rows
  int w = 0;  // cols

  std::int64_t numel() const {
    return std::int64_t(n) * c * h * w;
  }
  std::int64_t pixels() const { return std::int64_t(h) * w; }

  bool operator==(const TensorShape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

inline void check_shape_positive(const TensorShape& s, const char* what) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
    throw ConfigError(std::string(what) + ": non-positive tensor shape " + s.str());
}

}  // namespace labelreg
