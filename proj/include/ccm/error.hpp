// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ccm {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents do not match an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf encountered, or a numerical procedure left its domain.
class NumericalError : public Error {
public:
    using Error::Error;
};

// Degenerate boxes, empty masks, warps that lost the object.
class GeometryError : public Error {
public:
    using Error::Error;
};

// Invalid configuration values or ranges.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Training diverged or was asked to do something impossible.
class TrainingError : public Error {
public:
    using Error::Error;
};

// Required on-disk state (checkpoint, dataset) is missing or unusable.
class StateError : public Error {
public:
    using Error::Error;
};

// Malformed user-supplied data (rank vectors, CSV rows, JSON).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Pairwise comparison graph is disconnected; scores are not identifiable.
class RankDeficientError : public Error {
public:
    using Error::Error;
};

// File I/O failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace ccm
