#pragma once

#include <stdexcept>
#include <string>

namespace softpipe {

// Base for every error the library raises. `exit_code` follows the CLI
// convention: 2 for contract/config problems, 3 for numeric failures.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 2)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(what, 3) {}
};

// Raised when the summarizer stops before emitting any content token.
class DegenerateSummaryError : public Error {
 public:
  using Error::Error;
};

}  // namespace softpipe
