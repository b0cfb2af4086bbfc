#pragma once

#include <stdexcept>
#include <string>

namespace melora {

/// Malformed file contents: bad magic, unsupported version, truncation,
/// unparseable config lines.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Filesystem-level failures (open, write, rename).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace melora
