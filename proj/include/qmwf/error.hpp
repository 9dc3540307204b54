#pragma once

#include <stdexcept>
#include <string>

namespace qmwf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A dense tensor would exceed the configured element cap.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Input that has no meaningful normalized form (zero vectors, empty sentences).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

/// A file could not be read or parsed.
class LoadError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf appeared in a computation that must stay finite.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed or corrupted checkpoint.
class FormatError : public Error {
public:
    using Error::Error;
};

/// User-supplied configuration failed validation.
class ValidationError : public Error {
public:
    using Error::Error;
};

}  // namespace qmwf
