#pragma once

#include <stdexcept>
#include <string>

namespace moeforge {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A documented precondition was violated (bad count, out-of-range index, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A file or record could not be parsed.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace moeforge
