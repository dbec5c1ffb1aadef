#pragma once

#include <stdexcept>
#include <string>

namespace diffslam {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible for the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// Caller violated an operation precondition (non-scalar loss, mixed tapes, ...).
struct ContractError : Error {
    using Error::Error;
};

// Numerical singularity (se3 log near angle pi, ...).
struct SingularityError : Error {
    using Error::Error;
};

// Alignment problem does not constrain all six degrees of freedom.
struct DegenerateGeometryError : Error {
    using Error::Error;
};

// No usable pixel overlap between the frames being aligned.
struct InsufficientOverlapError : Error {
    using Error::Error;
};

// Not enough data to compute a metric (fewer than two matched poses, ...).
struct InsufficientDataError : Error {
    using Error::Error;
};

// File system / parsing failures; message carries path and line when known.
struct IoError : Error {
    using Error::Error;
};

// An iterative experiment exceeded its divergence guard.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace diffslam
