// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>

namespace ddit {

// Bad or unknown configuration key/value.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A required input file or directory does not exist or cannot be opened.
class MissingFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A file exists but its contents are corrupt or truncated.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace ddit
