#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace swapprobe {

/// Root of every error the harness raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IntegrityError : public Error {
public:
    IntegrityError(std::vector<std::string> ids, const std::string& what)
        : Error(what), ids_(std::move(ids)) {}
    const std::vector<std::string>& ids() const noexcept { return ids_; }

private:
    std::vector<std::string> ids_;
};

class IoError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class MarkerError : public Error { public: using Error::Error; };
class PatternError : public Error { public: using Error::Error; };
class DimensionMismatch : public Error { public: using Error::Error; };

// inference
class TransportError : public Error { public: using Error::Error; };
class ModeMismatch : public Error { public: using Error::Error; };
class ServerError : public Error {
public:
    ServerError(int status, const std::string& what)
        : Error("HTTP " + std::to_string(status) + ": " + what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

// protocol / metrics / sidecar
class PoolExhausted : public Error { public: using Error::Error; };
class InsufficientVariants : public Error { public: using Error::Error; };
class EmptyDenominator : public Error { public: using Error::Error; };
class SidecarUnavailable : public Error { public: using Error::Error; };
class EmptyWindow : public Error { public: using Error::Error; };

}  // namespace swapprobe
