#pragma once

#include <stdexcept>
#include <string>

namespace treemil {

// Error taxonomy mirrors the CLI exit codes: config/usage -> 1,
// data -> 2, numeric failure -> 3.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Structural misuse of tensors or tree coordinates (wrong shapes,
// out-of-range node indices). Messages name the operation and the
// offending shapes.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace treemil
