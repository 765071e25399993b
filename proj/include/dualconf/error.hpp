#pragma once

#include <stdexcept>
#include <string>

namespace dualconf {

// Process exit codes used by the CLI; every library error maps onto one.
enum class ExitCode : int {
    ok = 0,
    usage = 1,
    data = 2,
    convergence = 3,
    transport = 4,
};

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ExitCode::usage, what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ExitCode::usage, "config error: " + what) {}
};

class InvalidRecordError : public Error {
public:
    InvalidRecordError(const std::string& record_id, const std::string& what)
        : Error(ExitCode::data, "invalid record '" + record_id + "': " + what), record_id_(record_id) {}
    const std::string& record_id() const noexcept { return record_id_; }

private:
    std::string record_id_;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& field, const std::string& what)
        : Error(ExitCode::data, "line " + std::to_string(line) + ": field '" + field + "': " + what),
          line_(line), field_(field) {}
    std::size_t line() const noexcept { return line_; }
    const std::string& field() const noexcept { return field_; }

private:
    std::size_t line_;
    std::string field_;
};

class FitError : public Error {
public:
    explicit FitError(const std::string& what) : Error(ExitCode::data, "fit error: " + what) {}
};

class ConvergenceError : public Error {
public:
    explicit ConvergenceError(const std::string& what) : Error(ExitCode::convergence, what) {}
};

class TransportError : public Error {
public:
    explicit TransportError(const std::string& what) : Error(ExitCode::transport, what) {}
};

class LeakageError : public Error {
public:
    explicit LeakageError(const std::string& what) : Error(ExitCode::data, "leakage guard: " + what) {}
};

} // namespace dualconf
