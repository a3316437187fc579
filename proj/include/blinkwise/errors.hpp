#pragma once

#include <stdexcept>
#include <string>

namespace blinkwise {

/// Process exit codes used by the command-line tool. Every library error maps
/// onto exactly one of these.
enum class ExitCode : int {
  ok = 0,
  input_format = 2,
  precondition = 3,
  divergence = 4,
  io = 5,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  [[nodiscard]] virtual ExitCode code() const noexcept = 0;
};

/// Malformed input text. `line()` is 1-based, 0 when not tied to a line.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::input_format; }
  [[nodiscard]] std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::precondition; }
};

/// Both eyes (or the single eye requested) have zero width.
class DegenerateEyeError : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

/// A non-finite value showed up in the model or the loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::divergence; }
};

class IoError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::io; }
};

}  // namespace blinkwise
