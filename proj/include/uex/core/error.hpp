#pragma once

#include <stdexcept>
#include <string>

namespace uex {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's precondition (bad shapes, out-of-range values).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or corrupt files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A training loss or gradient became NaN/Inf.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, int epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace uex
