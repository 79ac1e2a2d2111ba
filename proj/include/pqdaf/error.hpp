#pragma once

#include <stdexcept>
#include <string>

namespace pqdaf {

// Error taxonomy shared by every module. The CLI maps kinds to exit codes
// (validation -> 2, external -> 3, shortfall -> 4).
enum class ErrorKind {
    Validation,
    External,
    Shortfall,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline Error validation_error(std::string message) {
    return Error(ErrorKind::Validation, std::move(message));
}

inline Error external_error(std::string message) {
    return Error(ErrorKind::External, std::move(message));
}

// Raised when a class cannot supply the requested number of samples.
class ShortfallError : public Error {
public:
    ShortfallError(int category_id, long requested, long available, std::string message)
        : Error(ErrorKind::Shortfall, std::move(message)),
          category_id_(category_id), requested_(requested), available_(available) {}

    int category_id() const noexcept { return category_id_; }
    long requested() const noexcept { return requested_; }
    long available() const noexcept { return available_; }

private:
    int category_id_;
    long requested_;
    long available_;
};

} // namespace pqdaf
