#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spooflab {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegeneratePointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---- ingestion -------------------------------------------------------------

class IoError : public Error {
 public:
  using Error::Error;
};

class MalformedFileError : public Error {
 public:
  using Error::Error;
};

class MissingCalibrationKeyError : public MalformedFileError {
 public:
  explicit MissingCalibrationKeyError(std::string key)
      : MalformedFileError("missing calibration key: " + key), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class NonInvertibleCalibrationError : public Error {
 public:
  using Error::Error;
};

class FrameIncompleteError : public Error {
 public:
  using Error::Error;
};

// ---- attack ----------------------------------------------------------------

class InfeasibleBudgetError : public Error {
 public:
  InfeasibleBudgetError(std::size_t requested, std::size_t achievable)
      : Error("infeasible point budget: requested " + std::to_string(requested) +
              " points but at most " + std::to_string(achievable) +
              " distinct rays fit the azimuth window"),
        requested_(requested),
        achievable_(achievable) {}
  std::size_t requested() const noexcept { return requested_; }
  std::size_t max_achievable() const noexcept { return achievable_; }

 private:
  std::size_t requested_;
  std::size_t achievable_;
};

class BudgetExceededError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// ---- detectors -------------------------------------------------------------

class DetectorError : public Error {
 public:
  using Error::Error;
};

class ConnectionError : public DetectorError {
 public:
  using DetectorError::DetectorError;
};

class TimeoutError : public DetectorError {
 public:
  using DetectorError::DetectorError;
};

class MalformedResponseError : public DetectorError {
 public:
  using DetectorError::DetectorError;
};

class ProtocolVersionError : public DetectorError {
 public:
  using DetectorError::DetectorError;
};

}  // namespace spooflab
