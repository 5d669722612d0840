// SPDX-License-Identifier: Apache-2.0
//
// Error categories shared by every module. The CLI maps each category to a
// process exit code.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fbnprune {

enum class ErrorKind {
    Config,       // bad configuration value or unknown key
    Io,           // unreadable / unwritable file
    Format,       // malformed artifact (magic, version, truncation, shape)
    Argument,     // invalid argument to an operation
    Dimension,    // shape mismatch between operands
    Numeric,      // non-finite values, degenerate data
    Convergence,  // iterative solver failed where failure is fatal
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string & what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Exit status used by the CLI: 0 ok, 2 config, 3 io, 4 numeric, 5 convergence.
int exit_code(ErrorKind kind) noexcept;

[[noreturn]] inline void fail(ErrorKind kind, const std::string & what) {
    throw Error(kind, what);
}

}  // namespace fbnprune
