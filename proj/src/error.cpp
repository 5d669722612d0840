// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/error.hpp"

namespace fbnprune {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config:      return "config";
        case ErrorKind::Io:          return "io";
        case ErrorKind::Format:      return "format";
        case ErrorKind::Argument:    return "argument";
        case ErrorKind::Dimension:   return "dimension";
        case ErrorKind::Numeric:     return "numeric";
        case ErrorKind::Convergence: return "convergence";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Argument:
        case ErrorKind::Dimension:
            return 2;
        case ErrorKind::Io:
        case ErrorKind::Format:
            return 3;
        case ErrorKind::Numeric:
            return 4;
        case ErrorKind::Convergence:
            return 5;
    }
    return 1;
}

}  // namespace fbnprune
