#pragma once

#include <stdexcept>
#include <string>

namespace syrenets {

// Bad arguments, malformed files, unusable paths. CLI exit code 2.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed persisted data (dataset CSV, checkpoint). CLI exit code 2.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& msg, size_t line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
    explicit ParseError(const std::string& msg) : std::runtime_error(msg), line_(0) {}
    size_t line() const { return line_; }

private:
    size_t line_;
};

// Numeric-domain violation or non-finite blow-up. CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& op, double operand)
        : std::runtime_error("numeric domain error in '" + op +
                             "' with operand " + std::to_string(operand)),
          op_(op), operand_(operand) {}
    explicit NumericError(const std::string& msg)
        : std::runtime_error(msg), op_(msg), operand_(0) {}
    const std::string& op() const { return op_; }
    double operand() const { return operand_; }

private:
    std::string op_;
    double operand_;
};

} // namespace syrenets
