#pragma once

#include <stdexcept>
#include <string>

namespace ditforge {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError/DomainError/PlanError/UsageError -> 2
//   NumericError/StateError/ShapeError/FitError  -> 3
//   FormatError/IoError                          -> 4
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class PlanError : public Error {
public:
    PlanError(const std::string& msg, long long min_achievable_params)
        : Error(msg), min_achievable(min_achievable_params) {}
    long long min_achievable = 0;
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg, long long byte_offset = -1)
        : Error(byte_offset >= 0 ? msg + " (byte offset " + std::to_string(byte_offset) + ")" : msg),
          offset(byte_offset) {}
    long long offset = -1;
};

class FitError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

} // namespace ditforge
