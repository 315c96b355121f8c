#include "micro/error.hpp"

#include <sstream>

namespace micro {

const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::empty_input: return "empty_input";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::io: return "io";
    case ErrorCode::parse: return "parse";
    }
    return "unknown";
}

Error::Error(ErrorCode code, const std::string& message, std::size_t index)
    : std::runtime_error(message), code_(code), index_(index) {}

Error Error::dimension(const std::string& what, std::size_t expected, std::size_t actual) {
    std::ostringstream msg;
    msg << what << ": expected dimension " << expected << ", got " << actual;
    Error e(ErrorCode::dimension_mismatch, msg.str());
    e.expected_ = expected;
    e.actual_ = actual;
    return e;
}

void require_dim(const char* what, std::size_t expected, std::size_t actual) {
    if (expected != actual) throw Error::dimension(what, expected, actual);
}

} // namespace micro
