#pragma once

#include <stdexcept>
#include <string>

namespace feddiffuse {

// Invalid static configuration (bad schedule range, impossible model dims, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input files.
struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values encountered mid-computation; message carries context.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace feddiffuse
