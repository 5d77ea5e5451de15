#pragma once

#include <stdexcept>
#include <string>

namespace voxelforge {

// Base of every error raised by the library. kind() is the machine-parsable
// class name printed by the command-line tool.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error("FormatError", m) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("ShapeError", m) {}
};

struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& m) : Error("DegenerateInputError", m) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("ConfigError", m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m) : Error("IoError", m) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("NumericError", m) {}
};

struct RangeError : Error {
    explicit RangeError(const std::string& m) : Error("RangeError", m) {}
};

}  // namespace voxelforge
