#pragma once

#include <stdexcept>
#include <string>

namespace netdeconv {

// Violated precondition or malformed request. Maps to CLI exit code 2.
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or corrupt file. Carries the byte offset where parsing gave up.
struct format_error : std::runtime_error {
    format_error(const std::string& msg, long long offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    long long byte_offset;
};

// Divergence, overflow or loss of positive-definiteness. Maps to CLI exit code 3.
struct numerical_error : std::runtime_error {
    numerical_error(const std::string& msg, long step_index = -1)
        : std::runtime_error(step_index >= 0 ? msg + " (at step " + std::to_string(step_index) + ")"
                                             : msg),
          step(step_index) {}
    long step;
};

} // namespace netdeconv
