#pragma once

#include <stdexcept>
#include <string>

namespace downscale {

// Dimension / shape mismatches between tensors.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Unsupported or inconsistent configuration (stride, preset, config file keys).
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Value outside an operation's mathematical domain (e.g. non-positive exponent).
struct DomainError : std::domain_error {
    explicit DomainError(const std::string& msg) : std::domain_error(msg) {}
};

// Degenerate data: zero variance, failed generator calibration, empty sets.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Binary container problems: bad magic, version, truncation.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& msg, int epoch) : std::runtime_error(msg), epoch(epoch) {}
    int epoch;
};

} // namespace downscale
