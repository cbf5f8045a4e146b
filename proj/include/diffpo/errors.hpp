// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace diffpo {

/// Invalid configuration value (bad hyperparameter, malformed arch, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid runtime input (dimension mismatch, non-finite data, empty batch).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite value produced during a numeric computation.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Failure inside the reverse sampling chain; carries the offending timestep.
class SamplingError : public std::runtime_error {
public:
    SamplingError(const std::string& what, int timestep)
        : std::runtime_error(what), timestep_(timestep) {}
    int timestep() const noexcept { return timestep_; }

private:
    int timestep_;
};

/// Malformed persisted data; carries the 1-based line number when known.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, long line = -1)
        : std::runtime_error(what), line_(line) {}
    long line() const noexcept { return line_; }

private:
    long line_;
};

/// Filesystem-level failure; message names the offending path.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace diffpo
