#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace micro {

enum class ErrorCode {
    dimension_mismatch,
    invalid_argument,
    empty_input,
    non_finite,
    divergence,
    io,
    parse,
};

const char* to_string(ErrorCode code);

/// Structured error thrown by every module. `expected`/`actual` carry
/// dimensions for dimension mismatches; `index` carries the example or
/// step index where one applies (npos otherwise).
class Error : public std::runtime_error {
public:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    Error(ErrorCode code, const std::string& message, std::size_t index = npos);

    ErrorCode code() const noexcept { return code_; }
    std::size_t index() const noexcept { return index_; }
    std::size_t expected() const noexcept { return expected_; }
    std::size_t actual() const noexcept { return actual_; }

    static Error dimension(const std::string& what, std::size_t expected, std::size_t actual);

private:
    ErrorCode code_;
    std::size_t index_;
    std::size_t expected_ = 0;
    std::size_t actual_ = 0;
};

/// Throws a dimension_mismatch Error unless `actual == expected`.
void require_dim(const char* what, std::size_t expected, std::size_t actual);

} // namespace micro
