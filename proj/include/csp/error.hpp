#pragma once

#include <stdexcept>
#include <string>

namespace csp {

/// Base for every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An argument violates a documented precondition.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// An operation was invoked in the wrong pipeline stage.
class StateError : public Error {
public:
    using Error::Error;
};

/// Malformed input text. `line` is 1-based, 0 when the error is not tied to a line.
class ParseError : public Error {
public:
    ParseError(const std::string& message, std::size_t line)
        : Error(line == 0 ? message : "line " + std::to_string(line) + ": " + message), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// No overhead token count reproduces the calibration target.
class CalibrationError : public Error {
public:
    CalibrationError(const std::string& message, double best_residual)
        : Error(message), best_residual_(best_residual) {}

    double best_residual() const noexcept { return best_residual_; }

private:
    double best_residual_;
};

}  // namespace csp
