#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedseg {

// Invalid shapes, sizes, or settings detected before any math runs.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke an API contract (wrong root for backward, mismatched masks, ...).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad values inside otherwise well-formed data (labels outside {0,1}, ...).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// On-disk format violations: bad magic, version, truncation. Carries a byte offset.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::uint64_t offset;
};

// File-system failures; message always names the path.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf reached a value that must stay finite.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Client/server exchanged incompatible payloads (layout or length mismatch).
class ProtocolError : public std::runtime_error {
public:
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed-point encoding overflow in secure aggregation.
class RangeError : public std::runtime_error {
public:
    explicit RangeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Batch statistics undefined (single element per channel in train mode).
class DegenerateBatchError : public std::runtime_error {
public:
    explicit DegenerateBatchError(const std::string& msg) : std::runtime_error(msg) {}
};

// Synthetic generation could not place a tumor after bounded retries.
class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedseg
