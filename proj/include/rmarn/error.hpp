#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace rmarn {

// Error taxonomy shared by the whole library. The CLI maps kinds to exit
// codes: argument/config -> 1, data/io -> 2, numeric -> 3.
enum class ErrorKind {
    argument,
    config,
    data,
    io,
    numeric,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        fail(kind, message);
    }
}

inline const char* error_kind_name(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::argument: return "argument";
        case ErrorKind::config: return "config";
        case ErrorKind::data: return "data";
        case ErrorKind::io: return "io";
        case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
}

}  // namespace rmarn
