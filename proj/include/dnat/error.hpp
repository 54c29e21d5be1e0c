#pragma once

#include <stdexcept>
#include <string>

namespace dnat {

/// Domain failure: bad input data, violated precondition, I/O problem.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed command line or configuration document.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace dnat
