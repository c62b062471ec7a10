#pragma once

#include <stdexcept>
#include <string>

namespace kerrmech {

/// Base class for all library errors. Subclasses map to distinct CLI exit codes.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Parameter or input invariant violated. Exit code 2.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

/// Iterative method failed to reach its tolerance. Exit code 3.
class ConvergenceError : public Error {
public:
    explicit ConvergenceError(const std::string& msg) : Error(msg) {}
};

/// Requested quantity is undefined because the system is dynamically
/// unstable (unstable branch, parametric instability). Exit code 4.
class InstabilityError : public Error {
public:
    explicit InstabilityError(const std::string& msg) : Error(msg) {}
};

/// Config file problem; message carries line number and key. Exit code 1.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

} // namespace kerrmech
