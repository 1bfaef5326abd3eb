// common.hpp
// Error taxonomy, numeric precision switch, and small shared utilities.
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtsal {

// Base class for all library errors. Subclasses map onto CLI exit codes:
// ConfigError -> 2, NumericError -> 3, IoError/FormatError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Global numeric precision. f64 is the default and is required by the
// tight gradient tolerances in the test suite; f32 rounds every produced
// value through IEEE single precision and is intended for training runs.
enum class Precision { f64, f32 };

void set_precision(Precision p);
Precision active_precision();

// Optional runtime finiteness checks on every op output (debug runs).
void set_debug_checks(bool enabled);
bool debug_checks_enabled();

std::string shape_str(const std::vector<int>& shape);

// Runs body(i) for i in [0, n). With threads <= 1 the loop is serial.
// Work is split into contiguous chunks so per-index results can be written
// into preallocated slots and reduced in index order afterwards.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& body);

}  // namespace rtsal
