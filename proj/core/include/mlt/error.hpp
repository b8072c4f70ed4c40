#pragma once

#include <stdexcept>
#include <string>

namespace mlt {

// Error categories map 1:1 onto the CLI exit codes (see tools/mlt.cpp):
// ConfigError -> 2, DataError -> 3, CheckError -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckError : std::runtime_error {
    explicit CheckError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}
}  // namespace detail

}  // namespace mlt
