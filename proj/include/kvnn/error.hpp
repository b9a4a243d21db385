#pragma once

#include <stdexcept>
#include <string>

namespace kvnn {

// Every failure raised by the library carries a short machine-readable code
// next to the human-readable message so the CLI can emit JSON error objects.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline Error dimension_error(const std::string& what) {
    return Error("dimension_mismatch", what);
}

inline Error invalid_argument(const std::string& what) {
    return Error("invalid_argument", what);
}

}  // namespace kvnn
