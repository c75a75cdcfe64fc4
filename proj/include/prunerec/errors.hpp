#pragma once

#include <stdexcept>
#include <string>

namespace prunerec {

// Base for all recoverable errors raised by the library. CLI maps these to
// exit code 1, except IoError which maps to 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension error: " + msg) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error("index error: " + msg) {}
};

struct PlanError : Error {
    explicit PlanError(const std::string& msg) : Error("plan error: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

}  // namespace prunerec
