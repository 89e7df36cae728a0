#pragma once

#include <stdexcept>
#include <string>

namespace vqlcmd {

// Shape/dimension violations (matmul mismatch, bad layer-norm width, ...).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Out-of-range token or class ids.
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated call contracts (non-scalar backward root, N=0 grids, bad rates).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// s > t where an ordered time pair is required.
struct OrderingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite math is required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointTruncatedError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointShapeError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
    using CheckpointError::CheckpointError;
};

}  // namespace vqlcmd
